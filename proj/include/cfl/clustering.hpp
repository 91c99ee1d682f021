#pragma once

// Cosine-similarity clustering: similarity matrices, the min-max optimal
// bipartition, the separation gap, the noise bounds H and the cross-cluster
// bound, and the four-way split decision.

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cfl/io.hpp"
#include "cfl/numerics.hpp"

namespace cfl {

/// Symmetric m x m cosine-similarity matrix with unit diagonal. Row/column r
/// belongs to client ids[r].
class SimilarityMatrix {
public:
    SimilarityMatrix() = default;

    /// Validates and wraps raw entries (row-major).
    SimilarityMatrix(std::vector<int> ids, std::vector<double> entries) : ids_(std::move(ids)), a_(std::move(entries)) {
        const std::size_t m = ids_.size();
        if (a_.size() != m * m) throw InvalidArgument("similarity matrix: entry count does not match ids");
        for (std::size_t i = 0; i < m; ++i) {
            if (a_[i * m + i] != 1.0) throw InvalidArgument("similarity matrix: diagonal must be exactly 1");
            for (std::size_t j = 0; j < m; ++j) {
                const double x = a_[i * m + j];
                if (!std::isfinite(x) || x < -1.0 || x > 1.0) throw InvalidArgument("similarity matrix: entry outside [-1, 1]");
                if (std::abs(x - a_[j * m + i]) > 1e-12) throw InvalidArgument("similarity matrix: not symmetric");
            }
        }
    }

    std::size_t size() const noexcept { return ids_.size(); }
    const std::vector<int>& ids() const noexcept { return ids_; }
    const std::vector<double>& entries() const noexcept { return a_; }
    double operator()(std::size_t i, std::size_t j) const { return a_[i * ids_.size() + j]; }

private:
    std::vector<int> ids_;
    std::vector<double> a_;
};

/// Pairwise cosine similarities of `updates`; ids default to 0..m-1.
inline SimilarityMatrix similarity_matrix(std::span<const ParamVec> updates, std::vector<int> ids = {}) {
    const std::size_t m = updates.size();
    if (ids.empty()) {
        ids.resize(m);
        std::iota(ids.begin(), ids.end(), 0);
    }
    if (ids.size() != m) throw InvalidArgument("similarity_matrix: ids do not match updates");
    if (m == 0) throw InvalidArgument("similarity_matrix: no updates");
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (updates[i].dim() != updates[0].dim()) throw InvalidArgument("similarity_matrix: dimension mismatch");
        norms[i] = norm(updates[i]);
        if (norms[i] == 0.0) throw DegenerateVector("similarity_matrix: zero-norm update from client " + std::to_string(ids[i]), ids[i]);
    }
    std::vector<double> a(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        a[i * m + i] = 1.0;
        for (std::size_t j = i + 1; j < m; ++j) {
            const double ij = dot(updates[i], updates[j]) / (norms[i] * norms[j]);
            const double ji = dot(updates[j], updates[i]) / (norms[j] * norms[i]);
            const double s = std::clamp(0.5 * (ij + ji), -1.0, 1.0);
            a[i * m + j] = s;
            a[j * m + i] = s;
        }
    }
    return SimilarityMatrix(std::move(ids), std::move(a));
}

struct Bipartition {
    // Client ids; c1 holds the first row's client.
    std::vector<int> c1;
    std::vector<int> c2;
    double cross_max = 0.0;
};

namespace detail {

inline double cross_max_of(const SimilarityMatrix& alpha, const std::vector<std::size_t>& rows1, const std::vector<std::size_t>& rows2) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i : rows1)
        for (std::size_t j : rows2) mx = std::max(mx, alpha(i, j));
    return mx;
}

inline Bipartition make_bipartition(const SimilarityMatrix& alpha, const std::vector<std::size_t>& rows1,
                                    const std::vector<std::size_t>& rows2) {
    Bipartition bp;
    for (std::size_t r : rows1) bp.c1.push_back(alpha.ids()[r]);
    for (std::size_t r : rows2) bp.c2.push_back(alpha.ids()[r]);
    bp.cross_max = cross_max_of(alpha, rows1, rows2);
    return bp;
}

struct DisjointSets {
    std::vector<std::size_t> parent;
    explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        parent[std::max(a, b)] = std::min(a, b);
        return true;
    }
};

}  // namespace detail

/// Agglomerative bipartition: visit pairs in order of descending similarity
/// (ties by row-major index) and merge their clusters until two remain. The
/// result minimizes the maximum cross-cluster similarity. O(m^2 log m).
inline Bipartition optimal_bipartition(const SimilarityMatrix& alpha) {
    const std::size_t m = alpha.size();
    if (m < 2) throw InvalidArgument("optimal_bipartition: need at least 2 clients");
    std::vector<std::size_t> order;
    order.reserve(m * (m - 1));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            if (i != j) order.push_back(i * m + j);
    const auto& a = alpha.entries();
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x] > a[y]; });

    detail::DisjointSets sets(m);
    std::size_t clusters = m;
    for (std::size_t idx : order) {
        if (clusters == 2) break;
        if (sets.unite(idx / m, idx % m)) --clusters;
    }
    std::vector<std::size_t> rows1, rows2;
    const std::size_t root0 = sets.find(0);
    for (std::size_t r = 0; r < m; ++r) (sets.find(r) == root0 ? rows1 : rows2).push_back(r);
    return detail::make_bipartition(alpha, rows1, rows2);
}

/// Exhaustive search over all 2^(m-1) - 1 bipartitions. Ties go to the
/// lexicographically smallest c1 (which always holds row 0).
inline Bipartition brute_force_bipartition(const SimilarityMatrix& alpha) {
    const std::size_t m = alpha.size();
    if (m < 2) throw InvalidArgument("brute_force_bipartition: need at least 2 clients");
    if (m > 20) throw InvalidArgument("brute_force_bipartition: m > 20 is too large to enumerate");
    const std::uint32_t full = (1u << (m - 1)) - 1;  // bits for rows 1..m-1; set bit = row in c1
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> best1, best2;
    for (std::uint32_t mask = 0; mask < full; ++mask) {
        std::vector<std::size_t> rows1{0}, rows2;
        for (std::size_t r = 1; r < m; ++r) ((mask >> (r - 1)) & 1u ? rows1 : rows2).push_back(r);
        const double cm = detail::cross_max_of(alpha, rows1, rows2);
        if (cm < best || (cm == best && std::lexicographical_compare(rows1.begin(), rows1.end(), best1.begin(), best1.end()))) {
            best = cm;
            best1 = std::move(rows1);
            best2 = std::move(rows2);
        }
    }
    return detail::make_bipartition(alpha, best1, best2);
}

/// g(alpha) = min same-distribution similarity - optimal cross-cluster maximum.
/// `truth[r]` is the distribution of row r.
inline double separation_gap(const SimilarityMatrix& alpha, std::span<const int> truth) {
    const std::size_t m = alpha.size();
    if (truth.size() != m) throw InvalidArgument("separation_gap: truth does not cover every client");
    if (m < 2) throw InvalidArgument("separation_gap: need at least 2 clients");
    double intra = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j)
            if (truth[i] == truth[j]) intra = std::min(intra, alpha(i, j));
    if (!std::isfinite(intra)) throw InvalidArgument("separation_gap: no pair of clients shares a distribution");
    return intra - optimal_bipartition(alpha).cross_max;
}

/// Correct in the sense that no distribution has clients on both sides.
inline bool is_correct_bipartition(const Bipartition& bp, const std::map<int, int>& truth_of) {
    std::vector<int> left;
    for (int id : bp.c1) left.push_back(truth_of.at(id));
    std::sort(left.begin(), left.end());
    for (int id : bp.c2) {
        if (std::binary_search(left.begin(), left.end(), truth_of.at(id))) return false;
    }
    return true;
}

/// H = -g_i g_j + sqrt(1 - g_i^2) sqrt(1 - g_j^2): worst-case similarity of two
/// noisy estimates of the same direction with relative noise g_i, g_j.
inline double h_bound(double gamma_i, double gamma_j) {
    if (!(gamma_i >= 0.0 && gamma_i < 1.0 && gamma_j >= 0.0 && gamma_j < 1.0))
        throw InvalidArgument("h_bound: noise ratios must lie in [0, 1)");
    return -gamma_i * gamma_j + std::sqrt(1.0 - gamma_i * gamma_i) * std::sqrt(1.0 - gamma_j * gamma_j);
}

/// Upper bound on the optimal cross-cluster similarity for k distributions:
/// cos(pi/(k-1)) H + sin(pi/(k-1)) sqrt(1 - H^2) when H >= cos(pi/(k-1)), else 1.
inline double cross_bound(int k, double h) {
    if (k < 2) throw InvalidArgument("cross_bound: k must be >= 2");
    const double angle = std::numbers::pi / static_cast<double>(k - 1);
    const double c = std::cos(angle);
    if (h < c) return 1.0;
    const double s = k == 2 ? 0.0 : std::sin(angle);  // sin(pi) is not exactly 0 in floating point
    return c * h + s * std::sqrt(std::max(0.0, 1.0 - h * h));
}

enum class SimilaritySource { weight_update, gradient };

inline const char* to_string(SimilaritySource s) { return s == SimilaritySource::weight_update ? "weight_update" : "gradient"; }

struct SplitConfig {
    double eps1 = 1e-3;
    double eps2 = 0.1;
    double gamma_max = 0.0;
    SimilaritySource similarity_source = SimilaritySource::weight_update;

    void validate() const {
        if (!(eps1 > 0.0) || !(eps2 > 0.0)) throw InvalidArgument("SplitConfig: eps1 and eps2 must be positive");
        if (!(gamma_max >= 0.0 && gamma_max < 1.0)) throw InvalidArgument("SplitConfig: gamma_max must lie in [0, 1)");
    }
};

enum class SplitDecision { split, converged_terminal, stationary_but_reject, not_stationary };

inline const char* to_string(SplitDecision d) {
    switch (d) {
        case SplitDecision::split: return "split";
        case SplitDecision::converged_terminal: return "converged_terminal";
        case SplitDecision::stationary_but_reject: return "stationary_but_reject";
        case SplitDecision::not_stationary: return "not_stationary";
    }
    return "?";
}

/// Threshold on gamma_max below which a bipartition with this cross maximum is accepted.
inline double gamma_acceptance_threshold(double cross_max) { return std::sqrt(std::max(0.0, (1.0 - cross_max) / 2.0)); }

inline SplitDecision split_decision(double server_norm, double max_client_norm, double cross_max, const SplitConfig& cfg) {
    if (server_norm >= cfg.eps1) return SplitDecision::not_stationary;
    if (max_client_norm <= cfg.eps2) return SplitDecision::converged_terminal;
    if (cfg.gamma_max < gamma_acceptance_threshold(cross_max)) return SplitDecision::split;
    return SplitDecision::stationary_but_reject;
}

/// Adjusted Rand index between two labelings of the same items.
inline double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
    if (a.size() != b.size()) throw InvalidArgument("adjusted_rand_index: labelings differ in length");
    const double n = static_cast<double>(a.size());
    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> ca, cb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        joint[{a[i], b[i]}] += 1.0;
        ca[a[i]] += 1.0;
        cb[b[i]] += 1.0;
    }
    auto c2 = [](double x) { return x * (x - 1.0) / 2.0; };
    double index = 0.0, sa = 0.0, sb = 0.0;
    for (const auto& [_, v] : joint) index += c2(v);
    for (const auto& [_, v] : ca) sa += c2(v);
    for (const auto& [_, v] : cb) sb += c2(v);
    const double expected = sa * sb / c2(n);
    const double max_index = 0.5 * (sa + sb);
    if (max_index == expected) return 1.0;  // both labelings trivial
    return (index - expected) / (max_index - expected);
}

/// CSV form: header row of client ids, then m rows of m full-precision values.
inline std::string to_csv(const SimilarityMatrix& alpha) {
    std::ostringstream out;
    const std::size_t m = alpha.size();
    for (std::size_t i = 0; i < m; ++i) out << (i ? "," : "") << alpha.ids()[i];
    out << '\n';
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) out << (j ? "," : "") << format_double(alpha(i, j));
        out << '\n';
    }
    return out.str();
}

inline SimilarityMatrix similarity_from_csv(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!line.empty()) lines.push_back(line);
        start = end + 1;
    }
    if (lines.empty()) throw FormatError("similarity CSV: empty file");
    std::vector<int> ids;
    for (auto field : split_csv_line(lines[0])) {
        const double v = parse_double(field);
        if (v != std::floor(v)) throw FormatError("similarity CSV: header ids must be integers");
        ids.push_back(static_cast<int>(v));
    }
    const std::size_t m = ids.size();
    if (lines.size() != m + 1)
        throw FormatError("similarity CSV: expected " + std::to_string(m) + " rows, found " + std::to_string(lines.size() - 1));
    std::vector<double> a;
    a.reserve(m * m);
    for (std::size_t r = 0; r < m; ++r) {
        const auto fields = split_csv_line(lines[r + 1]);
        if (fields.size() != m)
            throw FormatError("similarity CSV: row " + std::to_string(r + 1) + " has " + std::to_string(fields.size()) +
                              " values, expected " + std::to_string(m));
        for (auto f : fields) a.push_back(parse_double(f));
    }
    try {
        return SimilarityMatrix(std::move(ids), std::move(a));
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("similarity CSV: ") + e.what());
    }
}

}  // namespace cfl
