#include "scaffold/config.hpp"

#include <fstream>
#include <sstream>

#include "scaffold/common.hpp"

namespace scaffold {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str());
}

Config Config::parse_string(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            fail(ErrorKind::Data, "config line " + std::to_string(line_no) +
                                      ": expected key=value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            fail(ErrorKind::Data,
                 "config line " + std::to_string(line_no) + ": empty key");
        cfg.values_[key] = value;
    }
    return cfg;
}

bool Config::has(const std::string& key) const {
    return values_.count(key) > 0;
}

std::string Config::get_string(const std::string& key,
                               const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        std::size_t pos = 0;
        double v = std::stod(it->second, &pos);
        if (pos != it->second.size())
            fail(ErrorKind::Data, "config key " + key + ": bad number");
        return v;
    } catch (const std::invalid_argument&) {
        fail(ErrorKind::Data, "config key " + key + ": bad number");
    } catch (const std::out_of_range&) {
        fail(ErrorKind::Data, "config key " + key + ": number out of range");
    }
}

long long Config::get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        std::size_t pos = 0;
        long long v = std::stoll(it->second, &pos);
        if (pos != it->second.size()) {
            // allow scientific notation like 1e6 for step counts
            double d = get_double(key, 0.0);
            return static_cast<long long>(d);
        }
        return v;
    } catch (const std::exception&) {
        double d = get_double(key, static_cast<double>(fallback));
        return static_cast<long long>(d);
    }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    fail(ErrorKind::Data, "config key " + key + ": expected a boolean");
}

}  // namespace scaffold
