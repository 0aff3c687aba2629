#include "osdbench/tomlmini.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "osdbench/common.hpp"

namespace osd::toml {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Strips a trailing comment, respecting quoted strings.
std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (c == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
        if (c == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

[[noreturn]] void fail(std::size_t line_no, const std::string& what) {
    throw ParseError("toml:" + std::to_string(line_no) + ": " + what);
}

bool valid_key(const std::string& key) {
    if (key.empty()) return false;
    for (char c : key)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
    return true;
}

Value parse_scalar(const std::string& raw, std::size_t line_no) {
    std::string s = trim(raw);
    if (s.empty()) fail(line_no, "empty value");
    if (s.front() == '"') {
        if (s.size() < 2 || s.back() != '"') fail(line_no, "unterminated string");
        std::string out;
        for (std::size_t i = 1; i + 1 < s.size(); ++i) {
            char c = s[i];
            if (c == '\\') {
                if (i + 2 >= s.size()) fail(line_no, "dangling escape");
                char e = s[++i];
                switch (e) {
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    default: fail(line_no, std::string("unsupported escape \\") + e);
                }
            } else {
                out += c;
            }
        }
        return make_string(out);
    }
    if (s == "true") return make_bool(true);
    if (s == "false") return make_bool(false);

    bool looks_float = s.find_first_of(".eE") != std::string::npos;
    if (!looks_float) {
        std::int64_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec == std::errc() && p == s.data() + s.size()) return make_int(v);
    }
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used == s.size() && std::isfinite(v)) return make_double(v);
    } catch (const std::exception&) {
    }
    fail(line_no, "cannot parse value: " + s);
}

Value parse_value(const std::string& raw, std::size_t line_no) {
    std::string s = trim(raw);
    if (!s.empty() && s.front() == '[') {
        if (s.back() != ']') fail(line_no, "unterminated array");
        Value arr;
        arr.kind = Value::Kind::array;
        std::string body = s.substr(1, s.size() - 2);
        std::string item;
        bool in_string = false;
        for (std::size_t i = 0; i <= body.size(); ++i) {
            char c = i < body.size() ? body[i] : ',';
            if (c == '"' && (i == 0 || body[i - 1] != '\\')) in_string = !in_string;
            if (c == ',' && !in_string) {
                if (!trim(item).empty()) arr.array.push_back(parse_scalar(item, line_no));
                item.clear();
            } else {
                item += c;
            }
        }
        for (std::size_t i = 1; i < arr.array.size(); ++i) {
            Value::Kind a = arr.array[i].kind, b = arr.array[0].kind;
            bool numeric_mix = (a == Value::Kind::integer || a == Value::Kind::floating) &&
                               (b == Value::Kind::integer || b == Value::Kind::floating);
            if (a != b && !numeric_mix) fail(line_no, "mixed-type array");
        }
        return arr;
    }
    return parse_scalar(s, line_no);
}

double value_as_double(const Value& v, const std::string& key) {
    if (v.kind == Value::Kind::floating) return v.floating;
    if (v.kind == Value::Kind::integer) return static_cast<double>(v.integer);
    throw ParseError("toml key " + key + ": expected a number");
}

std::string render_scalar(const Value& v) {
    switch (v.kind) {
        case Value::Kind::string: {
            std::string out = "\"";
            for (char c : v.str) {
                if (c == '"' || c == '\\') out += '\\';
                out += c;
            }
            return out + "\"";
        }
        case Value::Kind::integer:
            return std::to_string(v.integer);
        case Value::Kind::floating: {
            std::ostringstream os;
            os.precision(17);
            os << v.floating;
            std::string s = os.str();
            if (s.find_first_of(".eE") == std::string::npos) s += ".0";
            return s;
        }
        case Value::Kind::boolean:
            return v.boolean ? "true" : "false";
        case Value::Kind::array:
            break;
    }
    throw ParseError("toml: nested arrays are not supported");
}

}  // namespace

bool Table::has(const std::string& key) const { return values_.count(key) > 0; }

const Value& Table::at(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ParseError("toml: missing key " + key);
    return it->second;
}

std::string Table::get_string(const std::string& key) const {
    const Value& v = at(key);
    if (v.kind != Value::Kind::string) throw ParseError("toml key " + key + ": expected a string");
    return v.str;
}

std::int64_t Table::get_int(const std::string& key) const {
    const Value& v = at(key);
    if (v.kind != Value::Kind::integer)
        throw ParseError("toml key " + key + ": expected an integer");
    return v.integer;
}

double Table::get_double(const std::string& key) const { return value_as_double(at(key), key); }

bool Table::get_bool(const std::string& key) const {
    const Value& v = at(key);
    if (v.kind != Value::Kind::boolean)
        throw ParseError("toml key " + key + ": expected a boolean");
    return v.boolean;
}

std::vector<std::string> Table::get_string_array(const std::string& key) const {
    const Value& v = at(key);
    if (v.kind != Value::Kind::array) throw ParseError("toml key " + key + ": expected an array");
    std::vector<std::string> out;
    for (const auto& e : v.array) {
        if (e.kind != Value::Kind::string)
            throw ParseError("toml key " + key + ": expected string elements");
        out.push_back(e.str);
    }
    return out;
}

std::vector<double> Table::get_double_array(const std::string& key) const {
    const Value& v = at(key);
    if (v.kind != Value::Kind::array) throw ParseError("toml key " + key + ": expected an array");
    std::vector<double> out;
    for (const auto& e : v.array) out.push_back(value_as_double(e, key));
    return out;
}

std::vector<std::int64_t> Table::get_int_array(const std::string& key) const {
    const Value& v = at(key);
    if (v.kind != Value::Kind::array) throw ParseError("toml key " + key + ": expected an array");
    std::vector<std::int64_t> out;
    for (const auto& e : v.array) {
        if (e.kind != Value::Kind::integer)
            throw ParseError("toml key " + key + ": expected integer elements");
        out.push_back(e.integer);
    }
    return out;
}

std::string Table::get_string_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get_string(key) : fallback;
}
std::int64_t Table::get_int_or(const std::string& key, std::int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
}
double Table::get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}
bool Table::get_bool_or(const std::string& key, bool fallback) const {
    return has(key) ? get_bool(key) : fallback;
}

void Table::set(const std::string& key, Value v) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = std::move(v);
}

Table parse(const std::string& text) {
    Table table;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string s = trim(strip_comment(line));
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') fail(line_no, "unterminated section header");
            if (s.size() > 2 && s[1] == '[') fail(line_no, "array-of-tables not supported");
            section = trim(s.substr(1, s.size() - 2));
            if (!valid_key(section)) fail(line_no, "bad section name: " + section);
            continue;
        }
        std::size_t eq = std::string::npos;
        bool in_string = false;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"') in_string = !in_string;
            if (s[i] == '=' && !in_string) {
                eq = i;
                break;
            }
        }
        if (eq == std::string::npos) fail(line_no, "expected key = value");
        std::string key = trim(s.substr(0, eq));
        if (!valid_key(key)) fail(line_no, "bad key: " + key);
        std::string full = section.empty() ? key : section + "." + key;
        if (table.has(full)) fail(line_no, "duplicate key: " + full);
        table.set(full, parse_value(s.substr(eq + 1), line_no));
    }
    return table;
}

Table parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse(buf.str());
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

Value make_string(const std::string& s) {
    Value v;
    v.kind = Value::Kind::string;
    v.str = s;
    return v;
}
Value make_int(std::int64_t x) {
    Value v;
    v.kind = Value::Kind::integer;
    v.integer = x;
    return v;
}
Value make_double(double x) {
    Value v;
    v.kind = Value::Kind::floating;
    v.floating = x;
    return v;
}
Value make_bool(bool x) {
    Value v;
    v.kind = Value::Kind::boolean;
    v.boolean = x;
    return v;
}
Value make_string_array(const std::vector<std::string>& xs) {
    Value v;
    v.kind = Value::Kind::array;
    for (const auto& x : xs) v.array.push_back(make_string(x));
    return v;
}
Value make_double_array(const std::vector<double>& xs) {
    Value v;
    v.kind = Value::Kind::array;
    for (double x : xs) v.array.push_back(make_double(x));
    return v;
}
Value make_int_array(const std::vector<std::int64_t>& xs) {
    Value v;
    v.kind = Value::Kind::array;
    for (std::int64_t x : xs) v.array.push_back(make_int(x));
    return v;
}

std::string emit(const Table& table) {
    std::ostringstream out;
    std::string current_section;
    bool first = true;
    for (const auto& key : table.keys()) {
        std::size_t dot = key.rfind('.');
        std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
        std::string leaf = dot == std::string::npos ? key : key.substr(dot + 1);
        if (section != current_section || (first && !section.empty())) {
            if (!first) out << "\n";
            if (!section.empty()) out << "[" << section << "]\n";
            current_section = section;
        }
        first = false;
        const Value& v = table.at(key);
        out << leaf << " = ";
        if (v.kind == Value::Kind::array) {
            out << "[";
            for (std::size_t i = 0; i < v.array.size(); ++i) {
                if (i) out << ", ";
                out << render_scalar(v.array[i]);
            }
            out << "]";
        } else {
            out << render_scalar(v);
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace osd::toml
