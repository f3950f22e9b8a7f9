#pragma once

#include <map>
#include <string>

namespace scaffold {

// Flat key=value configuration with dotted sections, e.g. train.lr=3e-4.
// '#' starts a comment; blank lines are ignored.
class Config {
  public:
    static Config parse_file(const std::string& path);
    static Config parse_string(const std::string& text);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key,
                           const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    long long get_int(const std::string& key, long long fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value) {
        values_[key] = value;
    }
    const std::map<std::string, std::string>& values() const {
        return values_;
    }

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace scaffold
