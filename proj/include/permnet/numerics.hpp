#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace permnet {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
using IMat = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Max-subtracted softmax.
template <class S>
Vec<S> softmax(const Vec<S>& x) {
    if (x.size() == 0) throw std::invalid_argument("softmax of empty vector");
    const S m = x.maxCoeff();
    Vec<S> e = (x.array() - m).exp();
    return e / e.sum();
}

/// ln(1 + (e-1) * softmax(x)): bounded in (0, 1], order-preserving, and the
/// entries are not constrained to sum to anything.
template <class S>
Vec<S> mlog_softmax(const Vec<S>& x) {
    Vec<S> s = softmax(x);
    return ((s.array() * (S(M_E) - S(1))) + S(1)).log();
}

/// out[p] = sum of entries on antidiagonal i+j == p for p in [0, rows);
/// antidiagonals at p >= rows fall outside the array and are dropped.
template <class S>
Vec<S> antidiagonal_sum(const Mat<S>& m) {
    const Eigen::Index L = m.rows(), K = m.cols();
    if (L < 1 || K < 1) throw std::invalid_argument("antidiagonal_sum needs a non-empty matrix");
    Vec<S> out = Vec<S>::Zero(L);
    for (Eigen::Index i = 0; i < L; ++i)
        for (Eigen::Index j = 0; j < K && i + j < L; ++j)
            out[i + j] += m(i, j);
    return out;
}

/// out[v] = sum of weights at positions whose token id is v.
template <class S>
Vec<S> scatter_accumulate(const Vec<S>& weights, const std::vector<int>& ids, int vocab_size) {
    if (weights.size() != static_cast<Eigen::Index>(ids.size()))
        throw std::invalid_argument("scatter_accumulate: weight/id length mismatch");
    Vec<S> out = Vec<S>::Zero(vocab_size);
    for (std::size_t p = 0; p < ids.size(); ++p) {
        const int v = ids[p];
        if (v < 0 || v >= vocab_size) throw std::invalid_argument("scatter_accumulate: id out of range");
        out[v] += weights[static_cast<Eigen::Index>(p)];
    }
    return out;
}

} // namespace permnet
