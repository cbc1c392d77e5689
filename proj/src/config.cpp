#include "stabilitybench/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "stabilitybench/errors.hpp"
#include "stabilitybench/rng.hpp"

namespace sb {

ConfigNode ConfigNode::scalar(std::string text) {
    ConfigNode n;
    n.kind_ = Kind::Scalar;
    n.scalar_ = std::move(text);
    return n;
}

ConfigNode ConfigNode::list() {
    ConfigNode n;
    n.kind_ = Kind::List;
    return n;
}

ConfigNode ConfigNode::map() {
    ConfigNode n;
    n.kind_ = Kind::Map;
    return n;
}

const std::string& ConfigNode::raw() const {
    if (!is_scalar()) throw ConfigError("expected a scalar value");
    return scalar_;
}

double ConfigNode::as_double() const {
    const std::string& s = raw();
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw ConfigError("trailing characters in number '" + s + "'");
        return v;
    } catch (const std::invalid_argument&) {
        throw ConfigError("not a number: '" + s + "'");
    } catch (const std::out_of_range&) {
        throw ConfigError("number out of range: '" + s + "'");
    }
}

std::int64_t ConfigNode::as_int() const {
    const std::string& s = raw();
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
        throw ConfigError("not an integer: '" + s + "'");
    return v;
}

std::uint64_t ConfigNode::as_uint() const {
    const std::string& s = raw();
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
        throw ConfigError("not a nonnegative integer: '" + s + "'");
    return v;
}

bool ConfigNode::as_bool() const {
    const std::string& s = raw();
    if (s == "true" || s == "on" || s == "1") return true;
    if (s == "false" || s == "off" || s == "0") return false;
    throw ConfigError("not a boolean: '" + s + "'");
}

const std::vector<ConfigNode>& ConfigNode::items() const {
    if (!is_list()) throw ConfigError("expected a list value");
    return items_;
}

std::vector<ConfigNode>& ConfigNode::items() {
    if (!is_list()) throw ConfigError("expected a list value");
    return items_;
}

const ConfigNode* ConfigNode::find(const std::string& key) const {
    if (!is_map()) throw ConfigError("expected a map while looking up '" + key + "'");
    for (const auto& [k, v] : entries_)
        if (k == key) return &v;
    return nullptr;
}

std::vector<const ConfigNode*> ConfigNode::find_all(const std::string& key) const {
    if (!is_map()) throw ConfigError("expected a map while looking up '" + key + "'");
    std::vector<const ConfigNode*> out;
    for (const auto& [k, v] : entries_)
        if (k == key) out.push_back(&v);
    return out;
}

ConfigNode& ConfigNode::insert(const std::string& key, ConfigNode value) {
    if (!is_map()) throw ConfigError("expected a map while inserting '" + key + "'");
    entries_.emplace_back(key, std::move(value));
    return entries_.back().second;
}

ConfigNode& ConfigNode::obtain(const std::string& key) {
    if (!is_map()) throw ConfigError("expected a map while obtaining '" + key + "'");
    for (auto& [k, v] : entries_)
        if (k == key) return v;
    return insert(key, ConfigNode::map());
}

const std::vector<std::pair<std::string, ConfigNode>>& ConfigNode::entries() const {
    if (!is_map()) throw ConfigError("expected a map");
    return entries_;
}

std::vector<std::string> ConfigNode::keys() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries()) out.push_back(k);
    return out;
}

double ConfigNode::get_double(const std::string& key, double fallback) const {
    const ConfigNode* n = find(key);
    return n ? n->as_double() : fallback;
}

std::int64_t ConfigNode::get_int(const std::string& key, std::int64_t fallback) const {
    const ConfigNode* n = find(key);
    return n ? n->as_int() : fallback;
}

bool ConfigNode::get_bool(const std::string& key, bool fallback) const {
    const ConfigNode* n = find(key);
    return n ? n->as_bool() : fallback;
}

std::string ConfigNode::get_string(const std::string& key, const std::string& fallback) const {
    const ConfigNode* n = find(key);
    return n ? n->raw() : fallback;
}

namespace {

bool needs_quotes(const std::string& s) {
    if (s.empty()) return true;
    for (char c : s) {
        if (std::isalnum(static_cast<unsigned char>(c))) continue;
        if (c == '-' || c == '_' || c == '.' || c == '+' || c == '/' || c == ':') continue;
        return true;
    }
    return false;
}

void dump_node(const ConfigNode& n, std::ostringstream& os, int indent, bool pretty) {
    const std::string pad = pretty ? std::string(static_cast<std::size_t>(indent) * 2, ' ') : "";
    const std::string inner_pad = pretty ? std::string((static_cast<std::size_t>(indent) + 1) * 2, ' ') : "";
    switch (n.kind()) {
        case ConfigNode::Kind::Scalar: {
            const std::string& s = n.raw();
            if (needs_quotes(s)) {
                os << '"';
                for (char c : s) {
                    if (c == '"' || c == '\\') os << '\\';
                    os << c;
                }
                os << '"';
            } else {
                os << s;
            }
            break;
        }
        case ConfigNode::Kind::List: {
            os << '[';
            bool first = true;
            for (const auto& item : n.items()) {
                if (!first) os << ", ";
                first = false;
                dump_node(item, os, indent + 1, false);
            }
            os << ']';
            break;
        }
        case ConfigNode::Kind::Map: {
            os << '{';
            if (pretty) os << '\n';
            bool first = true;
            for (const auto& [k, v] : n.entries()) {
                if (pretty) {
                    os << inner_pad;
                } else {
                    if (!first) os << ", ";
                }
                first = false;
                os << k << " = ";
                dump_node(v, os, indent + 1, pretty);
                if (pretty) os << '\n';
            }
            if (pretty) os << pad;
            os << '}';
            break;
        }
    }
}

struct Parser {
    const std::string& text;
    std::size_t pos = 0;

    explicit Parser(const std::string& t) : text(t) {}

    [[noreturn]] void fail(const std::string& msg) const {
        std::size_t line = 1;
        for (std::size_t i = 0; i < pos && i < text.size(); ++i)
            if (text[i] == '\n') ++line;
        throw ConfigError("config parse error at line " + std::to_string(line) + ": " + msg);
    }

    bool at_end() const { return pos >= text.size(); }
    char peek() const { return at_end() ? '\0' : text[pos]; }

    void skip_ws(bool cross_lines) {
        while (!at_end()) {
            char c = text[pos];
            if (c == '#') {
                while (!at_end() && text[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r') {
                ++pos;
            } else if ((c == '\n' || c == ',') && cross_lines) {
                ++pos;
            } else {
                break;
            }
        }
    }

    std::string parse_key() {
        skip_ws(true);
        std::size_t start = pos;
        while (!at_end()) {
            char c = text[pos];
            if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') {
                ++pos;
            } else {
                break;
            }
        }
        if (pos == start) fail("expected a key");
        return text.substr(start, pos - start);
    }

    void expect(char c) {
        skip_ws(false);
        if (peek() != c) fail(std::string("expected '") + c + "'");
        ++pos;
    }

    ConfigNode parse_value() {
        skip_ws(false);
        char c = peek();
        if (c == '{') return parse_map(true);
        if (c == '[') return parse_list();
        if (c == '"') return parse_quoted();
        return parse_bare();
    }

    ConfigNode parse_quoted() {
        ++pos;  // opening quote
        std::string out;
        while (!at_end() && text[pos] != '"') {
            if (text[pos] == '\\' && pos + 1 < text.size()) ++pos;
            out += text[pos++];
        }
        if (at_end()) fail("unterminated string");
        ++pos;  // closing quote
        return ConfigNode::scalar(out);
    }

    ConfigNode parse_bare() {
        std::size_t start = pos;
        while (!at_end()) {
            char c = text[pos];
            if (c == ',' || c == '\n' || c == '}' || c == ']' || c == '#' ||
                c == ' ' || c == '\t' || c == '\r')
                break;
            ++pos;
        }
        if (pos == start) fail("expected a value");
        return ConfigNode::scalar(text.substr(start, pos - start));
    }

    ConfigNode parse_list() {
        expect('[');
        ConfigNode n = ConfigNode::list();
        while (true) {
            skip_ws(true);
            if (at_end()) fail("unterminated list");
            if (peek() == ']') {
                ++pos;
                break;
            }
            n.items().push_back(parse_value());
        }
        return n;
    }

    ConfigNode parse_map(bool braced) {
        if (braced) expect('{');
        ConfigNode n = ConfigNode::map();
        while (true) {
            skip_ws(true);
            if (at_end()) {
                if (braced) fail("unterminated map");
                break;
            }
            if (braced && peek() == '}') {
                ++pos;
                break;
            }
            std::string key = parse_key();
            expect('=');
            n.insert(key, parse_value());
        }
        return n;
    }
};

}  // namespace

std::string ConfigNode::dump() const {
    std::ostringstream os;
    if (is_map()) {
        bool first = true;
        for (const auto& [k, v] : entries()) {
            if (!first) os << ", ";
            first = false;
            os << k << " = ";
            dump_node(v, os, 0, false);
        }
    } else {
        dump_node(*this, os, 0, false);
    }
    return os.str();
}

std::string ConfigNode::dump_pretty() const {
    std::ostringstream os;
    if (is_map()) {
        for (const auto& [k, v] : entries()) {
            os << k << " = ";
            dump_node(v, os, 0, true);
            os << '\n';
        }
    } else {
        dump_node(*this, os, 0, true);
        os << '\n';
    }
    return os.str();
}

void ConfigNode::apply_override(const std::string& dotted_key, const std::string& value_text) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        std::size_t dotp = dotted_key.find('.', start);
        if (dotp == std::string::npos) {
            parts.push_back(dotted_key.substr(start));
            break;
        }
        parts.push_back(dotted_key.substr(start, dotp - start));
        start = dotp + 1;
    }
    if (parts.empty() || parts.front().empty())
        throw ConfigError("empty override key");

    ConfigNode* node = this;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &node->obtain(parts[i]);
    if (!node->is_map())
        throw ConfigError("override path '" + dotted_key + "' does not reach a map");
    ConfigNode parsed = parse_value_text(value_text);
    for (auto& [k, v] : node->entries_) {
        if (k == parts.back()) {
            v = std::move(parsed);
            return;
        }
    }
    node->insert(parts.back(), std::move(parsed));
}

ConfigNode parse_config(const std::string& text) {
    Parser p(text);
    ConfigNode root = p.parse_map(false);
    p.skip_ws(true);
    if (!p.at_end()) p.fail("unexpected trailing content");
    return root;
}

ConfigNode parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

ConfigNode parse_value_text(const std::string& text) {
    Parser p(text);
    ConfigNode v = p.parse_value();
    p.skip_ws(true);
    if (!p.at_end()) p.fail("unexpected trailing content in value");
    return v;
}

std::string config_hash(const ConfigNode& node) {
    const std::string canon = node.dump();
    std::uint64_t h = fnv1a(canon);
    char buf[17];
    static const char* hex = "0123456789abcdef";
    for (int i = 15; i >= 0; --i) {
        buf[i] = hex[h & 0xf];
        h >>= 4;
    }
    buf[16] = '\0';
    return std::string(buf);
}

}  // namespace sb
