#pragma once

// Vector primitives shared by every part of the library: the flat parameter
// vector type, fixed-order reductions, and seeded random streams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cfl {

/// Raised when a caller passes arguments that violate an operation's contract.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A zero-norm vector reached an operation that needs a direction.
///
/// In the clustering context a zero update means a client sits exactly at a
/// stationary point of its own risk, so callers get the offending client id
/// (or -1 when the vector is not tied to a client).
class DegenerateVector : public std::runtime_error {
public:
    explicit DegenerateVector(const std::string& what, long client = -1)
        : std::runtime_error(what), client_(client) {}
    long client() const noexcept { return client_; }

private:
    long client_;
};

/// Flat real-valued parameter or update vector. Entries are always finite.
class ParamVec {
public:
    ParamVec() = default;
    explicit ParamVec(std::vector<double> values) : values_(std::move(values)) { validate(); }
    ParamVec(std::initializer_list<double> values) : values_(values) { validate(); }

    static ParamVec zeros(std::size_t dim) {
        if (dim == 0) throw InvalidArgument("ParamVec dimension must be >= 1");
        ParamVec v;
        v.values_.assign(dim, 0.0);
        return v;
    }

    std::size_t dim() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }
    double operator[](std::size_t i) const { return values_[i]; }
    std::span<const double> span() const noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    // Mutable access re-validates nothing; callers that write through it must
    // go through `checked()` before publishing the vector.
    std::vector<double>& mutable_values() noexcept { return values_; }
    ParamVec& checked() {
        validate();
        return *this;
    }

    friend bool operator==(const ParamVec&, const ParamVec&) = default;

private:
    void validate() const {
        if (values_.empty()) throw InvalidArgument("ParamVec dimension must be >= 1");
        for (double x : values_) {
            if (!std::isfinite(x)) throw InvalidArgument("ParamVec entries must be finite");
        }
    }

    std::vector<double> values_;
};

inline void require_same_dim(const ParamVec& a, const ParamVec& b, std::string_view where) {
    if (a.dim() != b.dim()) {
        throw InvalidArgument(std::string(where) + ": dimension mismatch (" + std::to_string(a.dim()) +
                              " vs " + std::to_string(b.dim()) + ")");
    }
}

// All reductions run in ascending index order so results are bitwise stable.

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double dot(const ParamVec& a, const ParamVec& b) {
    require_same_dim(a, b, "dot");
    return dot(a.span(), b.span());
}

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }
inline double norm(const ParamVec& v) { return norm(v.span()); }

/// Cosine similarity clamped to [-1, 1]. Throws DegenerateVector on a zero-norm input.
inline double cosine(const ParamVec& v, const ParamVec& w) {
    require_same_dim(v, w, "cosine");
    const double nv = norm(v);
    const double nw = norm(w);
    if (nv == 0.0 || nw == 0.0) throw DegenerateVector("cosine: zero-norm input");
    // Product of norms (not sqrt of product) keeps cosine(v, w) == cosine(w, v) bitwise.
    const double c = dot(v, w) / (nv * nw);
    return std::clamp(c, -1.0, 1.0);
}

inline ParamVec operator+(const ParamVec& a, const ParamVec& b) {
    require_same_dim(a, b, "add");
    std::vector<double> out(a.dim());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return ParamVec(std::move(out));
}

inline ParamVec operator-(const ParamVec& a, const ParamVec& b) {
    require_same_dim(a, b, "sub");
    std::vector<double> out(a.dim());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return ParamVec(std::move(out));
}

inline ParamVec operator*(double s, const ParamVec& a) {
    std::vector<double> out(a.dim());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a[i];
    return ParamVec(std::move(out));
}

inline ParamVec operator-(const ParamVec& a) { return -1.0 * a; }

/// Sum_i (w_i / sum w) * v_i, accumulated in list order.
inline ParamVec weighted_mean(std::span<const ParamVec> vectors, std::span<const double> weights) {
    if (vectors.empty()) throw InvalidArgument("weighted_mean: empty input");
    if (vectors.size() != weights.size()) throw InvalidArgument("weighted_mean: list length mismatch");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("weighted_mean: weights must be nonnegative");
        total += w;
    }
    if (!(total > 0.0)) throw InvalidArgument("weighted_mean: zero weight sum");
    const std::size_t d = vectors.front().dim();
    std::vector<double> acc(d, 0.0);
    for (std::size_t k = 0; k < vectors.size(); ++k) {
        if (vectors[k].dim() != d) throw InvalidArgument("weighted_mean: dimension mismatch");
        const double c = weights[k] / total;
        for (std::size_t i = 0; i < d; ++i) acc[i] += c * vectors[k][i];
    }
    return ParamVec(std::move(acc));
}

/// Deterministic random stream keyed by (seed, context label, client id, round).
///
/// Draws are built directly on the 64-bit Mersenne Twister output rather than on
/// <random> distributions, whose algorithms are implementation-defined.
class RandomStream {
public:
    RandomStream(std::uint64_t seed, std::string_view label = "root", std::int64_t client = 0, std::int64_t round = 0)
        : seed_(seed), key_(mix_key(seed, label, client, round)), engine_(key_) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t key() const noexcept { return key_; }

    /// Child stream; independent of how many draws this stream has made.
    RandomStream derive(std::string_view label, std::int64_t client = 0, std::int64_t round = 0) const {
        return RandomStream(key_, label, client, round);
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), unbiased.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw InvalidArgument("RandomStream::below: n must be positive");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    std::vector<double> normal_vector(std::size_t n) {
        std::vector<double> out(n);
        for (double& x : out) x = normal();
        return out;
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    std::vector<int> permutation(std::size_t n) {
        std::vector<int> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<int>(i);
        shuffle(p);
        return p;
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    static std::uint64_t mix_key(std::uint64_t seed, std::string_view label, std::int64_t client, std::int64_t round) {
        std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
        for (unsigned char c : label) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        std::uint64_t k = splitmix(seed);
        k = splitmix(k ^ h);
        k = splitmix(k ^ static_cast<std::uint64_t>(client));
        k = splitmix(k ^ static_cast<std::uint64_t>(round));
        return k;
    }

    std::uint64_t seed_;
    std::uint64_t key_;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace cfl
