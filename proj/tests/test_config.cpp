#include <doctest.h>

#include "stabilitybench/config.hpp"
#include "stabilitybench/errors.hpp"

using namespace sb;

TEST_CASE("parses scalars, lists, and nested maps") {
    const ConfigNode root = parse_config(R"(
# an audit
total_steps = 1000
seeds = [1, 2, 3]
task = { kind = quadratic, dim = 10, eig_max = 5.0 }
perturbation = { kind = lr-spike, magnitude = 10 }
perturbation = { kind = weight-noise }
)");
    CHECK(root.find("total_steps")->as_uint() == 1000);
    CHECK(root.find("seeds")->items().size() == 3);
    CHECK(root.find("seeds")->items()[2].as_int() == 3);
    CHECK(root.find("task")->find("kind")->raw() == "quadratic");
    CHECK(root.find("task")->find("eig_max")->as_double() == 5.0);
    CHECK(root.find_all("perturbation").size() == 2);
    CHECK(root.find("perturbation")->find("kind")->raw() == "lr-spike");
}

TEST_CASE("newlines and commas both separate map entries") {
    const ConfigNode a = parse_config("m = { x = 1, y = 2 }");
    const ConfigNode b = parse_config("m = {\n  x = 1\n  y = 2\n}");
    CHECK(a.dump() == b.dump());
}

TEST_CASE("quoted strings keep special characters") {
    const ConfigNode root = parse_config(R"(path = "a dir/with spaces")");
    CHECK(root.find("path")->raw() == "a dir/with spaces");
}

TEST_CASE("dump is parseable and stable") {
    const std::string text = "a = 1\nb = { c = [1, 2.5, x], d = hi }\n";
    const ConfigNode n = parse_config(text);
    const ConfigNode reparsed = parse_config(n.dump());
    CHECK(n.dump() == reparsed.dump());
    CHECK(config_hash(n) == config_hash(reparsed));
    const ConfigNode pretty = parse_config(n.dump_pretty());
    CHECK(n.dump() == pretty.dump());
}

TEST_CASE("overrides replace and create dotted paths") {
    ConfigNode root = parse_config("learner = { lr = 0.1 }\ntotal_steps = 100");
    root.apply_override("learner.lr", "0.2");
    CHECK(root.find("learner")->find("lr")->as_double() == 0.2);
    root.apply_override("learner.clip", "1.0");
    CHECK(root.find("learner")->find("clip")->as_double() == 1.0);
    root.apply_override("total_steps", "250");
    CHECK(root.find("total_steps")->as_uint() == 250);
    root.apply_override("closed_loop.enabled", "true");
    CHECK(root.find("closed_loop")->find("enabled")->as_bool());
}

TEST_CASE("type errors carry the offending text") {
    const ConfigNode root = parse_config("x = abc");
    CHECK_THROWS_AS(root.find("x")->as_int(), ConfigError);
    CHECK_THROWS_AS(root.find("x")->as_double(), ConfigError);
    CHECK_THROWS_AS(parse_config("x = ["), ConfigError);
    CHECK_THROWS_AS(parse_config("= 3"), ConfigError);
}

TEST_CASE("hash changes with content") {
    const ConfigNode a = parse_config("x = 1");
    const ConfigNode b = parse_config("x = 2");
    CHECK(config_hash(a) != config_hash(b));
    CHECK(config_hash(a).size() == 16);
}
