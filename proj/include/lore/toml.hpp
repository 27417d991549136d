#pragma once

// Minimal TOML subset, enough for recipe/spec files: bare keys, quoted
// strings, integers, floats, booleans, (nested) arrays, comments,
// [table] and [[array-of-table]] headers. Arrays may span lines until
// brackets balance. Not supported: dotted keys, inline tables, datetimes,
// multi-line strings. Parse errors carry 1-based line numbers.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "lore/errors.hpp"

namespace lore::toml {

struct ParseError : ValidationError {
    ParseError(const std::string& msg, int line)
        : ValidationError("TOML parse error at line " + std::to_string(line) + ": " + msg),
          line(line) {}
    int line;
};

class Value;
using Array = std::vector<Value>;

class Value {
  public:
    std::variant<std::string, std::int64_t, double, bool, Array> data;
    int line = 0;

    bool is_string() const { return std::holds_alternative<std::string>(data); }
    bool is_integer() const { return std::holds_alternative<std::int64_t>(data); }
    bool is_float() const { return std::holds_alternative<double>(data); }
    bool is_bool() const { return std::holds_alternative<bool>(data); }
    bool is_array() const { return std::holds_alternative<Array>(data); }

    const std::string& as_string() const { return expect<std::string>("a string"); }
    std::int64_t as_integer() const { return expect<std::int64_t>("an integer"); }
    bool as_bool() const { return expect<bool>("a boolean"); }
    const Array& as_array() const { return expect<Array>("an array"); }

    /// Integers widen to double here; everything else is an error.
    double as_number() const {
        if (is_integer()) return static_cast<double>(std::get<std::int64_t>(data));
        if (is_float()) return std::get<double>(data);
        throw ParseError("expected a number", line);
    }

  private:
    template <typename T>
    const T& expect(const char* what) const {
        if (!std::holds_alternative<T>(data))
            throw ParseError(std::string("expected ") + what, line);
        return std::get<T>(data);
    }
};

struct Table {
    std::map<std::string, Value> values;
    int line = 0;

    bool has(const std::string& key) const { return values.count(key) > 0; }
    const Value& at(const std::string& key) const {
        auto it = values.find(key);
        if (it == values.end())
            throw ValidationError("missing required key '" + key + "'");
        return it->second;
    }
    template <typename T>
    T get_or(const std::string& key, T fallback) const;
};

struct Document {
    Table root;
    std::map<std::string, Table> tables;              // [name]
    std::map<std::string, std::vector<Table>> lists;  // [[name]]
};

namespace detail {

inline bool is_bare_key_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
}

class Parser {
  public:
    explicit Parser(std::string_view text) : text_(text) {}

    Document parse() {
        Document doc;
        Table* current = &doc.root;
        while (!eof()) {
            skip_ws_and_comments();
            if (eof()) break;
            if (peek() == '[') {
                current = parse_header(doc);
            } else {
                auto [key, value] = parse_key_value();
                if (!current->values.emplace(key, std::move(value)).second)
                    throw ParseError("duplicate key '" + key + "'", line_);
            }
            expect_line_end();
        }
        return doc;
    }

  private:
    Table* parse_header(Document& doc) {
        const int line = line_;
        get();  // '['
        const bool is_list = !eof() && peek() == '[';
        if (is_list) get();
        skip_inline_ws();
        std::string name = parse_bare_key();
        skip_inline_ws();
        if (eof() || get() != ']') throw ParseError("expected ']' in table header", line);
        if (is_list && (eof() || get() != ']'))
            throw ParseError("expected ']]' in array-of-tables header", line);
        if (is_list) {
            doc.lists[name].push_back(Table{{}, line});
            return &doc.lists[name].back();
        }
        auto [it, inserted] = doc.tables.emplace(name, Table{{}, line});
        if (!inserted) throw ParseError("duplicate table [" + name + "]", line);
        return &it->second;
    }

    std::pair<std::string, Value> parse_key_value() {
        const int line = line_;
        std::string key = parse_bare_key();
        skip_inline_ws();
        if (eof() || get() != '=') throw ParseError("expected '=' after key '" + key + "'", line);
        skip_inline_ws();
        Value value = parse_value();
        return {std::move(key), std::move(value)};
    }

    std::string parse_bare_key() {
        if (!eof() && peek() == '"') return parse_string();
        std::string key;
        while (!eof() && is_bare_key_char(peek())) key.push_back(get());
        if (key.empty()) throw ParseError("expected a key", line_);
        return key;
    }

    Value parse_value() {
        if (eof()) throw ParseError("expected a value", line_);
        const int line = line_;
        const char c = peek();
        Value v;
        v.line = line;
        if (c == '"') {
            v.data = parse_string();
        } else if (c == '[') {
            v.data = parse_array();
        } else {
            std::string token;
            while (!eof() && peek() != ',' && peek() != ']' && peek() != '#' &&
                   peek() != '\n')
                token.push_back(get());
            while (!token.empty() && std::isspace(static_cast<unsigned char>(token.back())))
                token.pop_back();
            if (token.empty()) throw ParseError("expected a value", line);
            if (token == "true") {
                v.data = true;
            } else if (token == "false") {
                v.data = false;
            } else {
                v.data = parse_number(token, line);
            }
        }
        return v;
    }

    std::variant<std::string, std::int64_t, double, bool, Array> parse_number(
        std::string token, int line) {
        // underscores are TOML digit separators
        std::erase(token, '_');
        const bool looks_float = token.find_first_of(".eE") != std::string::npos ||
                                 token == "inf" || token == "nan" || token == "-inf";
        if (!looks_float) {
            std::int64_t i = 0;
            auto r = std::from_chars(token.data(), token.data() + token.size(), i);
            if (r.ec == std::errc{} && r.ptr == token.data() + token.size()) return i;
        }
        try {
            std::size_t used = 0;
            double d = std::stod(token, &used);
            if (used == token.size()) return d;
        } catch (...) {
        }
        throw ParseError("cannot parse value '" + token + "'", line);
    }

    std::string parse_string() {
        const int line = line_;
        get();  // opening quote
        std::string out;
        while (true) {
            if (eof() || peek() == '\n')
                throw ParseError("unterminated string", line);
            char c = get();
            if (c == '"') break;
            if (c == '\\') {
                if (eof()) throw ParseError("unterminated escape", line);
                char e = get();
                switch (e) {
                    case 'n': out.push_back('\n'); break;
                    case 't': out.push_back('\t'); break;
                    case 'r': out.push_back('\r'); break;
                    case '"': out.push_back('"'); break;
                    case '\\': out.push_back('\\'); break;
                    default:
                        throw ParseError(std::string("unsupported escape '\\") + e + "'", line);
                }
            } else {
                out.push_back(c);
            }
        }
        return out;
    }

    Array parse_array() {
        const int line = line_;
        get();  // '['
        Array items;
        while (true) {
            skip_ws_and_comments();
            if (eof()) throw ParseError("unterminated array", line);
            if (peek() == ']') {
                get();
                break;
            }
            items.push_back(parse_value());
            skip_ws_and_comments();
            if (eof()) throw ParseError("unterminated array", line);
            if (peek() == ',') {
                get();
            } else if (peek() != ']') {
                throw ParseError("expected ',' or ']' in array", line_);
            }
        }
        return items;
    }

    void expect_line_end() {
        skip_inline_ws();
        if (eof()) return;
        if (peek() == '#') {
            while (!eof() && peek() != '\n') get();
        }
        if (!eof()) {
            if (peek() != '\n')
                throw ParseError(std::string("unexpected trailing character '") + peek() + "'",
                                 line_);
            get();
        }
    }

    void skip_inline_ws() {
        while (!eof() && (peek() == ' ' || peek() == '\t' || peek() == '\r')) get();
    }

    void skip_ws_and_comments() {
        while (!eof()) {
            const char c = peek();
            if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                get();
            } else if (c == '#') {
                while (!eof() && peek() != '\n') get();
            } else {
                break;
            }
        }
    }

    bool eof() const { return pos_ >= text_.size(); }
    char peek() const { return text_[pos_]; }
    char get() {
        char c = text_[pos_++];
        if (c == '\n') ++line_;
        return c;
    }

    std::string_view text_;
    std::size_t pos_ = 0;
    int line_ = 1;
};

}  // namespace detail

inline Document parse(std::string_view text) { return detail::Parser(text).parse(); }

template <typename T>
T Table::get_or(const std::string& key, T fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    if constexpr (std::is_same_v<T, std::string>) {
        return it->second.as_string();
    } else if constexpr (std::is_same_v<T, bool>) {
        return it->second.as_bool();
    } else if constexpr (std::is_integral_v<T>) {
        return static_cast<T>(it->second.as_integer());
    } else {
        return static_cast<T>(it->second.as_number());
    }
}

}  // namespace lore::toml
