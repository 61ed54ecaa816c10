#pragma once

// Minimal reader for the plain-text data files used throughout the project:
//
//   # comment
//   key = value            (only before the first section)
//   [section]
//   token token token      (one table row per line)
//
// Blank lines and everything after '#' are ignored.

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vppbid/errors.hpp"

namespace vppbid {

struct TextRow {
    std::vector<std::string> cells;
    int line = 0;
};

struct TextTable {
    std::string name;
    std::vector<TextRow> rows;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split_ws(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
        if (j > i) out.emplace_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

}  // namespace detail

/// Parse a floating-point cell; `what` names the field in error messages.
inline double parse_double(const std::string& text, const std::string& what) {
    double value = 0.0;
    const char* first = text.data();
    const char* last = first + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last) throw ConfigError(what + ": expected a number, got '" + text + "'");
    return value;
}

inline long parse_int(const std::string& text, const std::string& what) {
    long value = 0;
    const char* first = text.data();
    const char* last = first + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last) throw ConfigError(what + ": expected an integer, got '" + text + "'");
    return value;
}

class TextDocument {
public:
    static TextDocument parse(std::istream& in, const std::string& source) {
        TextDocument doc;
        doc.source_ = source;
        std::string raw;
        int line_no = 0;
        std::ptrdiff_t current = -1;
        while (std::getline(in, raw)) {
            ++line_no;
            std::string_view line = raw;
            if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;

            if (line.front() == '[') {
                if (line.back() != ']') throw ConfigError(doc.where(line_no) + ": unterminated section header");
                std::string name(detail::trim(line.substr(1, line.size() - 2)));
                if (name.empty()) throw ConfigError(doc.where(line_no) + ": empty section name");
                if (doc.table(name) != nullptr) throw ConfigError(doc.where(line_no) + ": duplicate section [" + name + "]");
                doc.tables_.push_back(TextTable{name, {}});
                current = static_cast<std::ptrdiff_t>(doc.tables_.size()) - 1;
                continue;
            }
            if (const auto eq = line.find('='); eq != std::string_view::npos) {
                if (current >= 0)
                    throw ConfigError(doc.where(line_no) + ": key = value lines must precede the first section");
                std::string key(detail::trim(line.substr(0, eq)));
                std::string value(detail::trim(line.substr(eq + 1)));
                if (key.empty()) throw ConfigError(doc.where(line_no) + ": empty key");
                if (doc.values_.count(key) != 0) throw ConfigError(doc.where(line_no) + ": duplicate key '" + key + "'");
                doc.values_.emplace(key, value);
                doc.key_order_.push_back(key);
                continue;
            }
            if (current < 0) throw ConfigError(doc.where(line_no) + ": table row outside of a section");
            doc.tables_[static_cast<std::size_t>(current)].rows.push_back(TextRow{detail::split_ws(line), line_no});
        }
        return doc;
    }

    static TextDocument from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open '" + path.string() + "'");
        return parse(in, path.string());
    }

    static TextDocument from_string(const std::string& text, const std::string& source = "<string>") {
        std::istringstream in(text);
        return parse(in, source);
    }

    [[nodiscard]] const std::string& source() const { return source_; }
    [[nodiscard]] const std::vector<std::string>& keys() const { return key_order_; }
    [[nodiscard]] const std::vector<TextTable>& tables() const { return tables_; }

    [[nodiscard]] const TextTable* table(std::string_view name) const {
        for (const auto& t : tables_)
            if (t.name == name) return &t;
        return nullptr;
    }

    [[nodiscard]] const TextTable& require_table(std::string_view name) const {
        const TextTable* t = table(name);
        if (t == nullptr) throw ConfigError(source_ + ": missing section [" + std::string(name) + "]");
        return *t;
    }

    [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) != 0; }

    [[nodiscard]] std::optional<std::string> get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }

    [[nodiscard]] std::string require(const std::string& key) const {
        auto v = get(key);
        if (!v) throw ConfigError(source_ + ": missing key '" + key + "'");
        return *v;
    }

    [[nodiscard]] double get_double(const std::string& key, double fallback) const {
        auto v = get(key);
        return v ? parse_double(*v, source_ + ": " + key) : fallback;
    }

    [[nodiscard]] double require_double(const std::string& key) const {
        return parse_double(require(key), source_ + ": " + key);
    }

    /// Location prefix for error messages about a table row.
    [[nodiscard]] std::string where(int line) const { return source_ + ":" + std::to_string(line); }

private:
    std::string source_;
    std::map<std::string, std::string> values_;
    std::vector<std::string> key_order_;
    std::vector<TextTable> tables_;
};

}  // namespace vppbid
