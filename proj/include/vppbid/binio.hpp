#pragma once

// Little binary stream helpers for checkpoints. Values are written in host
// byte order; the header records a byte-order probe so foreign files fail
// loudly instead of loading garbage.

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "vppbid/errors.hpp"

namespace vppbid {

class BinaryWriter {
public:
    explicit BinaryWriter(std::ostream& os) : os_(os) {}

    template <class T>
    void put(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }

    void put_string(const std::string& s) {
        put<std::uint64_t>(s.size());
        os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    void put_matrix(const Eigen::MatrixXd& m) {
        put<std::int64_t>(m.rows());
        put<std::int64_t>(m.cols());
        os_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    }

    void put_vector(const Eigen::VectorXd& v) {
        put<std::int64_t>(v.size());
        os_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * v.size()));
    }

    void tag(const char* t) { put_string(t); }

    [[nodiscard]] bool good() const { return os_.good(); }

private:
    std::ostream& os_;
};

class BinaryReader {
public:
    BinaryReader(std::istream& is, std::string source) : is_(is), source_(std::move(source)) {}

    template <class T>
    T get() {
        static_assert(std::is_trivially_copyable_v<T>);
        T v{};
        is_.read(reinterpret_cast<char*>(&v), sizeof(T));
        check();
        return v;
    }

    std::string get_string() {
        const auto n = get<std::uint64_t>();
        if (n > (1u << 26)) fail("string length out of range");
        std::string s(n, '\0');
        is_.read(s.data(), static_cast<std::streamsize>(n));
        check();
        return s;
    }

    Eigen::MatrixXd get_matrix() {
        const auto r = get<std::int64_t>(), c = get<std::int64_t>();
        if (r < 0 || c < 0 || r * c > (std::int64_t{1} << 28)) fail("matrix shape out of range");
        Eigen::MatrixXd m(r, c);
        is_.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
        check();
        return m;
    }

    Eigen::VectorXd get_vector() {
        const auto n = get<std::int64_t>();
        if (n < 0 || n > (std::int64_t{1} << 28)) fail("vector length out of range");
        Eigen::VectorXd v(n);
        is_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * v.size()));
        check();
        return v;
    }

    void expect_tag(const char* t) {
        if (get_string() != t) fail(std::string("expected section '") + t + "'");
    }

    [[noreturn]] void fail(const std::string& what) const { throw ConfigError(source_ + ": corrupt checkpoint (" + what + ")"); }

private:
    void check() const {
        if (!is_) fail("unexpected end of file");
    }

    std::istream& is_;
    std::string source_;
};

}  // namespace vppbid
