#include "freeseg/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "freeseg/errors.hpp"

namespace freeseg {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

KVConfig KVConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str());
}

KVConfig KVConfig::parse_string(const std::string& text) {
    KVConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        c.set(key, value);
    }
    return c;
}

void KVConfig::set(const std::string& key, const std::string& value) {
    if (!kv_.count(key)) order_.push_back(key);
    kv_[key] = value;
}

bool KVConfig::has(const std::string& key) const { return kv_.count(key) != 0; }

std::string KVConfig::get_str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
}

std::string KVConfig::get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

double KVConfig::get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not a number: " + it->second);
    }
}

int64_t KVConfig::get_int(const std::string& key, int64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        size_t pos = 0;
        const int64_t v = std::stoll(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an integer: " + it->second);
    }
}

bool KVConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::string v = it->second;
    std::transform(v.begin(), v.end(), v.begin(), ::tolower);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key " + key + ": not a boolean: " + it->second);
}

std::string KVConfig::serialize() const {
    std::string out;
    for (const auto& k : order_) {
        out += k;
        out += " = ";
        out += kv_.at(k);
        out += "\n";
    }
    return out;
}

void KVConfig::require_known(const std::vector<std::string>& known) const {
    for (const auto& k : order_) {
        if (std::find(known.begin(), known.end(), k) == known.end())
            throw ConfigError("unknown config key: " + k);
    }
}

} // namespace freeseg
