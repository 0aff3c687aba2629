#include <string>
#include <vector>

#include "doctest.h"
#include "osdbench/common.hpp"
#include "osdbench/tomlmini.hpp"

using namespace osd;

TEST_CASE("scalar values parse with sections and comments") {
    toml::Table t = toml::parse(R"(# experiment configuration
title = "gap study"   # inline comment
count = 12
ratio = 0.75
negative = -3
sci = 1.5e2
flag = true
other = false

[data]
preset = "low_clutter"
images = 40
)");
    CHECK(t.get_string("title") == "gap study");
    CHECK(t.get_int("count") == 12);
    CHECK(t.get_double("ratio") == 0.75);
    CHECK(t.get_int("negative") == -3);
    CHECK(t.get_double("sci") == 150.0);
    CHECK(t.get_bool("flag"));
    CHECK_FALSE(t.get_bool("other"));
    CHECK(t.get_string("data.preset") == "low_clutter");
    CHECK(t.get_int("data.images") == 40);
    CHECK(t.has("data.images"));
    CHECK_FALSE(t.has("data.missing"));
}

TEST_CASE("strings keep escapes and hash marks inside quotes") {
    toml::Table t = toml::parse(R"(path = "out/run #3"
quoted = "say \"hi\"\n"
backslash = "a\\b"
)");
    CHECK(t.get_string("path") == "out/run #3");
    CHECK(t.get_string("quoted") == "say \"hi\"\n");
    CHECK(t.get_string("backslash") == "a\\b");
}

TEST_CASE("arrays parse as typed lists") {
    toml::Table t = toml::parse(R"(ints = [1, 2, 3]
floats = [0.1, 0.3, 1.0]
mixed_numeric = [1, 2.5]
names = ["a", "b"]
empty = []
)");
    CHECK(t.get_int_array("ints") == std::vector<std::int64_t>{1, 2, 3});
    CHECK(t.get_double_array("floats") == std::vector<double>{0.1, 0.3, 1.0});
    CHECK(t.get_double_array("mixed_numeric") == std::vector<double>{1.0, 2.5});
    CHECK(t.get_string_array("names") == std::vector<std::string>{"a", "b"});
    CHECK(t.get_int_array("empty").empty());
    // Integer arrays also read as doubles, not the other way around.
    CHECK(t.get_double_array("ints") == std::vector<double>{1.0, 2.0, 3.0});
    CHECK_THROWS_AS(t.get_int_array("floats"), ParseError);
}

TEST_CASE("malformed documents are rejected with line numbers") {
    CHECK_THROWS_WITH_AS(toml::parse("key\n"), doctest::Contains("toml:1"), ParseError);
    CHECK_THROWS_WITH_AS(toml::parse("a = 1\na = 2\n"), doctest::Contains("toml:2"), ParseError);
    CHECK_THROWS_AS(toml::parse("s = \"unterminated\n"), ParseError);
    CHECK_THROWS_AS(toml::parse("x = [1, \"a\"]\n"), ParseError);
    CHECK_THROWS_AS(toml::parse("[[points]]\n"), ParseError);
    CHECK_THROWS_AS(toml::parse("x = 1.5.2\n"), ParseError);
    CHECK_THROWS_AS(toml::parse("[unclosed\n"), ParseError);
}

TEST_CASE("missing and mistyped keys raise typed errors") {
    toml::Table t = toml::parse("a = 1\nb = \"x\"\n");
    CHECK_THROWS_AS(t.at("zz"), ParseError);
    CHECK_THROWS_AS(t.get_string("a"), ParseError);
    CHECK_THROWS_AS(t.get_int("b"), ParseError);
    CHECK_THROWS_AS(t.get_bool("a"), ParseError);
    // get_double accepts integer-typed values.
    CHECK(t.get_double("a") == 1.0);

    CHECK(t.get_string_or("zz", "fallback") == "fallback");
    CHECK(t.get_int_or("zz", 7) == 7);
    CHECK(t.get_double_or("zz", 2.5) == 2.5);
    CHECK(t.get_bool_or("zz", true));
    CHECK(t.get_int_or("a", 7) == 1);
}

TEST_CASE("emit round trips and is stable") {
    toml::Table t;
    t.set("seed", toml::make_int(7));
    t.set("label", toml::make_string("hash # quote \" done"));
    t.set("data.preset", toml::make_string("high_clutter"));
    t.set("data.noise", toml::make_double(0.25));
    t.set("data.whole", toml::make_double(2.0));  // must not re-parse as integer
    t.set("run.fractions", toml::make_double_array({0.1, 0.3, 1.0}));
    t.set("run.modes", toml::make_string_array({"none", "category_fraction"}));
    t.set("run.enabled", toml::make_bool(true));
    t.set("run.reps", toml::make_int_array({1, 2}));

    std::string text = toml::emit(t);
    toml::Table back = toml::parse(text);
    CHECK(back.get_int("seed") == 7);
    CHECK(back.get_string("label") == "hash # quote \" done");
    CHECK(back.get_string("data.preset") == "high_clutter");
    CHECK(back.get_double("data.noise") == 0.25);
    CHECK(back.get_double("data.whole") == 2.0);
    CHECK(back.at("data.whole").kind == toml::Value::Kind::floating);
    CHECK(back.get_double_array("run.fractions") == std::vector<double>{0.1, 0.3, 1.0});
    CHECK(back.get_string_array("run.modes") ==
          std::vector<std::string>{"none", "category_fraction"});
    CHECK(back.get_bool("run.enabled"));
    CHECK(back.get_int_array("run.reps") == std::vector<std::int64_t>{1, 2});

    CHECK(toml::emit(back) == text);  // emit(parse(emit)) is byte-stable
    CHECK(back.keys() == t.keys());
}

TEST_CASE("keys keep first-appearance order") {
    toml::Table t = toml::parse("b = 1\na = 2\n[s]\nz = 3\ny = 4\n");
    CHECK(t.keys() == std::vector<std::string>{"b", "a", "s.z", "s.y"});
}
