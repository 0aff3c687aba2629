#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace osd::toml {

// Covers the config subset in use: [section] headers, scalar key = value
// pairs (strings, integers, floats, booleans) and flat arrays of same-typed
// scalars, with # comments. No nested tables, array-of-tables, dates, or
// multi-line strings.
struct Value {
    enum class Kind { string, integer, floating, boolean, array };
    Kind kind = Kind::string;
    std::string str;
    std::int64_t integer = 0;
    double floating = 0.0;
    bool boolean = false;
    std::vector<Value> array;
};

class Table {
public:
    // Keys are dotted: "section.key", or bare "key" before the first section.
    bool has(const std::string& key) const;
    const Value& at(const std::string& key) const;  // ParseError when missing

    std::string get_string(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;  // accepts integer values
    bool get_bool(const std::string& key) const;
    std::vector<std::string> get_string_array(const std::string& key) const;
    std::vector<double> get_double_array(const std::string& key) const;
    std::vector<std::int64_t> get_int_array(const std::string& key) const;

    std::string get_string_or(const std::string& key, const std::string& fallback) const;
    std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;
    double get_double_or(const std::string& key, double fallback) const;
    bool get_bool_or(const std::string& key, bool fallback) const;

    void set(const std::string& key, Value v);
    // Keys in first-appearance order; drives the emitter.
    const std::vector<std::string>& keys() const { return order_; }

private:
    std::map<std::string, Value> values_;
    std::vector<std::string> order_;
};

Table parse(const std::string& text);
Table parse_file(const std::string& path);

Value make_string(const std::string& s);
Value make_int(std::int64_t v);
Value make_double(double v);
Value make_bool(bool v);
Value make_string_array(const std::vector<std::string>& v);
Value make_double_array(const std::vector<double>& v);
Value make_int_array(const std::vector<std::int64_t>& v);

// Renders dotted keys grouped into [section] blocks, sections and keys in
// first-appearance order; parse(emit(t)) round-trips.
std::string emit(const Table& table);

}  // namespace osd::toml
