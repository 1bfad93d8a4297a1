#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace percept {

/// Plain-text configuration: one `key = value` per line, `#` starts a
/// comment, `include <path>` splices another file (relative to the including
/// file). Later assignments override earlier ones.
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& file, int line, const std::string& what)
        : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), file_(file), line_(line) {}
    const std::string& file() const { return file_; }
    int line() const { return line_; }

private:
    std::string file_;
    int line_;
};

class Config {
public:
    struct Entry {
        std::string value;
        std::string file;
        int line = 0;
    };

    static Config parse_file(const std::filesystem::path& path) {
        Config c;
        std::vector<std::filesystem::path> stack;
        c.load(path, stack, "<command line>", 0);
        return c;
    }

    static Config parse_string(const std::string& text, const std::string& name = "<string>",
                               const std::filesystem::path& base = ".") {
        Config c;
        std::vector<std::filesystem::path> stack;
        std::istringstream is(text);
        c.parse_stream(is, name, base, stack);
        return c;
    }

    void set(const std::string& key, const std::string& value, const std::string& origin = "<override>") {
        entries_[key] = {value, origin, 0};
    }

    bool has(const std::string& key) const { return entries_.count(key) != 0; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? fallback : it->second.value;
    }

    std::optional<std::string> find(const std::string& key) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return std::nullopt;
        return it->second.value;
    }

    long long get_int(const std::string& key, long long fallback) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return fallback;
        return to_int(it->second);
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return fallback;
        return to_double(it->second);
    }

    std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return fallback;
        return split_list(it->second.value);
    }

    std::vector<long long> get_int_list(const std::string& key, const std::vector<long long>& fallback) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return fallback;
        std::vector<long long> out;
        for (const auto& item : split_list(it->second.value)) out.push_back(to_int({item, it->second.file, it->second.line}));
        return out;
    }

    /// Throws for the first key that is neither listed nor matched by a prefix ending in '.'.
    void require_known(const std::set<std::string>& keys, const std::vector<std::string>& prefixes = {}) const {
        for (const auto& [k, e] : entries_) {
            if (keys.count(k)) continue;
            const bool prefixed = std::any_of(prefixes.begin(), prefixes.end(),
                                              [&](const std::string& p) { return k.rfind(p, 0) == 0; });
            if (!prefixed) throw ConfigError(e.file, e.line, "unknown key '" + k + "'");
        }
    }

    /// Error located at the line that set `key`.
    ConfigError error_at(const std::string& key, const std::string& what) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) return ConfigError("<config>", 0, what);
        return ConfigError(it->second.file, it->second.line, what);
    }

    static std::vector<std::string> split_list(const std::string& v) {
        std::vector<std::string> out;
        std::string item;
        std::istringstream is(v);
        while (std::getline(is, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

private:
    static long long to_int(const Entry& e) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(e.value, &used);
            if (used == e.value.size()) return v;
        } catch (const std::exception&) {
        }
        throw ConfigError(e.file, e.line, "expected an integer, got '" + e.value + "'");
    }

    static double to_double(const Entry& e) {
        try {
            std::size_t used = 0;
            const double v = std::stod(e.value, &used);
            if (used == e.value.size()) return v;
        } catch (const std::exception&) {
        }
        throw ConfigError(e.file, e.line, "expected a number, got '" + e.value + "'");
    }

    void load(const std::filesystem::path& path, std::vector<std::filesystem::path>& stack, const std::string& from,
              int from_line) {
        std::error_code ec;
        const auto canon = std::filesystem::weakly_canonical(path, ec);
        if (std::find(stack.begin(), stack.end(), canon) != stack.end())
            throw ConfigError(from, from_line, "include cycle through " + path.string());
        std::ifstream in(path);
        if (!in) throw ConfigError(from, from_line, "cannot open config file " + path.string());
        stack.push_back(canon);
        parse_stream(in, path.string(), path.parent_path(), stack);
        stack.pop_back();
    }

    void parse_stream(std::istream& in, const std::string& name, const std::filesystem::path& base,
                      std::vector<std::filesystem::path>& stack) {
        std::string raw;
        for (int line_no = 1; std::getline(in, raw); ++line_no) {
            std::string line = raw;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.rfind("include", 0) == 0 && (line.size() == 7 || line[7] == ' ' || line[7] == '\t')) {
                const std::string target = trim(line.substr(7));
                if (target.empty()) throw ConfigError(name, line_no, "include needs a path");
                const std::filesystem::path p = std::filesystem::path(target).is_absolute() ? std::filesystem::path(target) : base / target;
                load(p, stack, name, line_no);
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError(name, line_no, "expected 'key = value', got '" + line + "'");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw ConfigError(name, line_no, "empty key");
            if (key.find_first_of(" \t") != std::string::npos)
                throw ConfigError(name, line_no, "key contains whitespace: '" + key + "'");
            entries_[key] = {value, name, line_no};
        }
    }

    std::map<std::string, Entry> entries_;
};

}  // namespace percept
