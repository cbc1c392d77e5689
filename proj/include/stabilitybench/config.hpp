#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace sb {

// Parsed node of the audit config format: a hierarchical key-value text file.
//
//   total_steps = 2000
//   seeds = [1, 2, 3]
//   perturbation = { dimension = signal, kind = grad-sign-flip, magnitude = 0.1 }
//   perturbation = { dimension = optimization, kind = lr-spike }   # repeatable
//
// Scalars keep their source text; typed access converts on demand. Maps keep
// insertion order and allow repeated keys (used for perturbation lists).
class ConfigNode {
public:
    enum class Kind { Scalar, List, Map };

    ConfigNode() : kind_(Kind::Map) {}
    static ConfigNode scalar(std::string text);
    static ConfigNode list();
    static ConfigNode map();

    Kind kind() const { return kind_; }
    bool is_scalar() const { return kind_ == Kind::Scalar; }
    bool is_list() const { return kind_ == Kind::List; }
    bool is_map() const { return kind_ == Kind::Map; }

    // Scalar access; throws ConfigError on kind/parse mismatch.
    const std::string& raw() const;
    double as_double() const;
    std::int64_t as_int() const;
    std::uint64_t as_uint() const;
    bool as_bool() const;

    // List access.
    const std::vector<ConfigNode>& items() const;
    std::vector<ConfigNode>& items();

    // Map access.
    const ConfigNode* find(const std::string& key) const;         // first match or null
    std::vector<const ConfigNode*> find_all(const std::string& key) const;
    ConfigNode& insert(const std::string& key, ConfigNode value); // appends
    ConfigNode& obtain(const std::string& key);                   // first match, creating a map if absent
    const std::vector<std::pair<std::string, ConfigNode>>& entries() const;
    std::vector<std::string> keys() const;

    // Typed lookups with defaults.
    double get_double(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;

    // Canonical single-line rendering; identical node -> identical text.
    std::string dump() const;
    // Multi-line rendering for config files written to artifact dirs.
    std::string dump_pretty() const;

    // Applies "a.b.c=value" to the tree; creates intermediate maps. The value
    // is parsed with the same grammar as a config file value.
    void apply_override(const std::string& dotted_key, const std::string& value_text);

private:
    Kind kind_;
    std::string scalar_;
    std::vector<ConfigNode> items_;
    std::vector<std::pair<std::string, ConfigNode>> entries_;
};

ConfigNode parse_config(const std::string& text);
ConfigNode parse_config_file(const std::string& path);
ConfigNode parse_value_text(const std::string& text);

// 64-bit content hash of the canonical rendering, as fixed-width hex.
std::string config_hash(const ConfigNode& node);

}  // namespace sb
