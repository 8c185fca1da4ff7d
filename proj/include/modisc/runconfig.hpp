#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace modisc::cli {

// exit code 1
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// exit code 2
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// exit code 3
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat `key = value` config with command-line overrides layered on top.
class RunConfig {
public:
    RunConfig() = default;

    // Lines are `key = value`; '#' starts a comment; blank lines ignored.
    static RunConfig from_file(const std::string& path);

    void set(const std::string& key, const std::string& value);
    void apply_override(const std::string& key_eq_value);  // "key=value"

    bool has(const std::string& key) const;
    std::string str(const std::string& key, const std::string& fallback) const;
    std::string str_required(const std::string& key) const;
    long long integer(const std::string& key, long long fallback) const;
    double real(const std::string& key, double fallback) const;
    bool boolean(const std::string& key, bool fallback) const;

    // UsageError if any stored key is not in the allowed set.
    void restrict_keys(const std::vector<std::string>& allowed) const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace modisc::cli
