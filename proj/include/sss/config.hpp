#pragma once

// `key = value` text configuration, one entry per line, `#` comments.
// Keys are module-prefixed, e.g. `match.patch_size = 13`.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace sss {

class Config {
public:
    Config() = default;

    static Config parse(std::istream& is)
    {
        Config cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos)
                line.erase(hash);
            const std::string t = trim(line);
            if (t.empty())
                continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(t.substr(0, eq));
            if (key.empty())
                throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
            cfg.values_[key] = trim(t.substr(eq + 1));
        }
        return cfg;
    }

    static Config load(const std::string& path)
    {
        std::ifstream is(path);
        if (!is)
            throw std::runtime_error("cannot read config " + path);
        return parse(is);
    }

    void save(const std::string& path) const
    {
        std::ofstream os(path);
        if (!os)
            throw std::runtime_error("cannot write " + path);
        write(os);
    }

    void write(std::ostream& os) const
    {
        for (const auto& [k, v] : values_)
            os << k << " = " << v << '\n';
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    template <typename T>
    void set(const std::string& key, T value)
    {
        std::ostringstream ss;
        ss.precision(17);
        ss << value;
        values_[key] = ss.str();
    }

    /// Reads `key` into `out` when present; `out` keeps its value otherwise.
    template <typename T>
    void get(const std::string& key, T& out) const
    {
        const auto it = values_.find(key);
        if (it == values_.end())
            return;
        used_.insert(key);
        out = convert<T>(key, it->second);
    }

    template <typename T>
    T value_or(const std::string& key, T fallback) const
    {
        get(key, fallback);
        return fallback;
    }

    /// Keys never read through get(); used to report typos.
    std::set<std::string> unused_keys() const
    {
        std::set<std::string> out;
        for (const auto& [k, v] : values_)
            if (!used_.count(k))
                out.insert(k);
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string trim(const std::string& s)
    {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos)
            return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    template <typename T>
    static T convert(const std::string& key, const std::string& v)
    {
        try {
            if constexpr (std::is_same_v<T, std::string>) {
                return v;
            } else if constexpr (std::is_same_v<T, bool>) {
                if (v == "true" || v == "1" || v == "yes")
                    return true;
                if (v == "false" || v == "0" || v == "no")
                    return false;
                throw std::invalid_argument(v);
            } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
                std::size_t pos = 0;
                const auto x = std::stoull(v, &pos);
                if (pos != v.size())
                    throw std::invalid_argument(v);
                return static_cast<T>(x);
            } else if constexpr (std::is_integral_v<T>) {
                std::size_t pos = 0;
                const auto x = std::stoll(v, &pos);
                if (pos != v.size())
                    throw std::invalid_argument(v);
                return static_cast<T>(x);
            } else {
                std::size_t pos = 0;
                const double x = std::stod(v, &pos);
                if (pos != v.size())
                    throw std::invalid_argument(v);
                return static_cast<T>(x);
            }
        } catch (const std::logic_error&) {
            throw std::runtime_error("config key " + key + ": cannot parse '" + v + "'");
        }
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
};

}  // namespace sss
