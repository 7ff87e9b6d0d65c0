#pragma once

#include <stdexcept>
#include <string>

namespace freeseg {

// Error taxonomy maps onto CLI exit codes: ConfigError -> 1 (usage),
// DataError -> 2, NumericFault -> 3.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

class NumericFault : public std::runtime_error {
public:
    explicit NumericFault(const std::string& what) : std::runtime_error(what) {}
};

} // namespace freeseg
