#pragma once

// Shared sequence-to-sequence model interface plus batching helpers.
// Sources and targets both carry literal <sos>/<eos> tokens; teacher forcing
// feeds tgt[0..T-2] and scores tgt[1..T-1], greedy decoding starts from
// <sos> and stops at <eos> or the step cap.

#include "permnet/graph.hpp"
#include "permnet/tokens.hpp"

#include <memory>
#include <string>
#include <vector>

namespace permnet {

struct Batch {
    IMat src;                  // B x L, padded with <pad>
    IMat tgt;                  // B x T, <sos> ... <eos> then <pad>
    std::vector<int> src_len;  // true lengths
    std::vector<int> tgt_len;
    int rows() const { return static_cast<int>(src.rows()); }
    int src_cols() const { return static_cast<int>(src.cols()); }
    int tgt_cols() const { return static_cast<int>(tgt.cols()); }
};

inline Batch make_batch(const std::vector<std::vector<int>>& src_ids,
                        const std::vector<std::vector<int>>& tgt_ids) {
    if (src_ids.empty() || src_ids.size() != tgt_ids.size())
        throw std::invalid_argument("make_batch: bad example set");
    const int B = static_cast<int>(src_ids.size());
    int L = 0, T = 0;
    for (const auto& s : src_ids) L = std::max(L, static_cast<int>(s.size()));
    for (const auto& t : tgt_ids) T = std::max(T, static_cast<int>(t.size()));
    Batch b;
    b.src = IMat::Constant(B, L, Vocabulary::kPad);
    b.tgt = IMat::Constant(B, T, Vocabulary::kPad);
    b.src_len.resize(static_cast<std::size_t>(B));
    b.tgt_len.resize(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
        const auto& s = src_ids[static_cast<std::size_t>(i)];
        const auto& t = tgt_ids[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < s.size(); ++j) b.src(i, static_cast<int>(j)) = s[j];
        for (std::size_t j = 0; j < t.size(); ++j) b.tgt(i, static_cast<int>(j)) = t[j];
        b.src_len[static_cast<std::size_t>(i)] = static_cast<int>(s.size());
        b.tgt_len[static_cast<std::size_t>(i)] = static_cast<int>(t.size());
    }
    return b;
}

/// Sizes a model needs to know about the data it will see.
struct DataShape {
    int vocab_size = 0;
    int max_src_len = 0;  // longest source incl. <sos>/<eos>
    int k_max = 0;        // index-embedding width (direct task data length cap)
};

struct LossInfo {
    Var loss;          // summed cross entropy over non-pad target tokens
    long tokens = 0;   // how many tokens contributed
};

template <class S>
class SeqModel {
public:
    virtual ~SeqModel() = default;
    virtual std::string kind() const = 0;
    virtual ParameterStore<S>& params() = 0;

    /// Build the training graph for one batch on the given tape.
    /// teacher=false feeds the model its own argmax instead of the reference
    /// (targets and the loss stay exactly the same either way).
    virtual LossInfo loss(Tape<S>& tape, const Batch& batch, bool teacher = true) = 0;

    /// Free-running greedy decode; returns emitted ids per example (no <sos>,
    /// stops after <eos> or max_steps).
    virtual std::vector<std::vector<int>> greedy(const Batch& batch, int max_steps) = 0;
};

template <class S>
std::vector<int> argmax_rows(const Mat<S>& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index best = 0;
        logits.row(r).maxCoeff(&best);
        out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
}

/// Teacher-forced target column t+1 with pads marked as ignore.
inline std::vector<int> target_column(const Batch& b, int col) {
    std::vector<int> out(static_cast<std::size_t>(b.rows()));
    for (int i = 0; i < b.rows(); ++i) out[static_cast<std::size_t>(i)] = b.tgt(i, col);
    return out;
}

/// 0/1 mask over source positions: zero at pads.
template <class S>
Mat<S> source_pad_mask(const Batch& b) {
    Mat<S> m = Mat<S>::Zero(b.rows(), b.src_cols());
    for (int i = 0; i < b.rows(); ++i)
        for (int t = 0; t < b.src_len[static_cast<std::size_t>(i)]; ++t) m(i, t) = S(1);
    return m;
}

/// Additive mask: 0 at real positions, large negative at pads.
template <class S>
Mat<S> source_neg_mask(const Batch& b) {
    Mat<S> m = Mat<S>::Constant(b.rows(), b.src_cols(), S(-1e9));
    for (int i = 0; i < b.rows(); ++i)
        for (int t = 0; t < b.src_len[static_cast<std::size_t>(i)]; ++t) m(i, t) = S(0);
    return m;
}

} // namespace permnet
