#pragma once

#include <map>
#include <string>
#include <vector>

namespace freeseg {

// Flat `key = value` config files. '#' starts a comment, blank lines are
// skipped. Values keep insertion order when serialized so configs diff
// cleanly.
class KVConfig {
public:
    static KVConfig parse_file(const std::string& path);
    static KVConfig parse_string(const std::string& text);

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;

    std::string get_str(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    std::vector<std::string> keys() const { return order_; }
    std::string serialize() const;

    // Throws ConfigError if any key is not in `known` (typo guard).
    void require_known(const std::vector<std::string>& known) const;

private:
    std::map<std::string, std::string> kv_;
    std::vector<std::string> order_;
};

} // namespace freeseg
