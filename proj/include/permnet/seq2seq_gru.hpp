#pragma once

// Plain GRU seq2seq baseline plus the additive-attention variant: the
// context vector (Bahdanau-style scores) is concatenated to the decoder
// input at every step.

#include "permnet/gru.hpp"
#include "permnet/model.hpp"
#include "permnet/rng.hpp"

namespace permnet {

template <class S>
class GruSeq2Seq final : public SeqModel<S> {
public:
    struct Options {
        int emb = 64;
        int hidden = 64;
        bool attention = false;
        int attn_width = 0;  // 0: use hidden
    };

    GruSeq2Seq(DataShape shape, Options opt) : shape_(shape), opt_(opt) {
        const int E = opt_.emb, H = opt_.hidden, V = shape_.vocab_size;
        store_.add("embed", V, E);
        enc_.prefix = "enc";
        enc_.add_params(store_, E, H);
        dec_.prefix = "dec";
        dec_.add_params(store_, opt_.attention ? E + 2 * H : E, H);
        if (opt_.attention) {
            const int A = opt_.attn_width > 0 ? opt_.attn_width : H;
            store_.add("attn.u", 2 * H, A);
            store_.add("attn.w", H, A);
            store_.add("attn.v", A, 1);
        }
        store_.add("out.w", H, V);
        store_.add("out.b", 1, V);
    }

    void init(Rng& rng) {
        const int E = opt_.emb, H = opt_.hidden;
        init_uniform(store_.at("embed"), E, rng);
        enc_.init(store_, rng);
        dec_.init(store_, rng);
        if (opt_.attention) {
            init_uniform(store_.at("attn.u"), 2 * H, rng);
            init_uniform(store_.at("attn.w"), H, rng);
            init_uniform(store_.at("attn.v"), H, rng);
        }
        init_uniform(store_.at("out.w"), H, rng);
        init_uniform(store_.at("out.b"), H, rng);
    }

    std::string kind() const override { return opt_.attention ? "gru-attn" : "gru"; }
    ParameterStore<S>& params() override { return store_; }
    const Options& options() const { return opt_; }

    LossInfo loss(Tape<S>& t, const Batch& batch, bool teacher = true) override {
        Ctx c = encode(t, batch);
        const int T = batch.tgt_cols();
        LossInfo info;
        std::vector<int> prev = target_column(batch, 0);
        Var h = c.h0;
        for (int step = 0; step + 1 < T; ++step) {
            Var logits;
            decode_step(t, c, batch, prev, h, logits, nullptr);
            long used = 0;
            Var ce = t.cross_entropy_sum(logits, target_column(batch, step + 1),
                                         Vocabulary::kPad, &used);
            info.tokens += used;
            info.loss = info.loss.valid() ? t.add(info.loss, ce) : ce;
            prev = teacher ? target_column(batch, step + 1) : argmax_rows(t.val(logits));
        }
        return info;
    }

    std::vector<std::vector<int>> greedy(const Batch& batch, int max_steps) override {
        Tape<S> t;
        t.grad_enabled = false;
        Ctx c = encode(t, batch);
        const int B = batch.rows();
        std::vector<std::vector<int>> out(static_cast<std::size_t>(B));
        std::vector<int> prev(static_cast<std::size_t>(B), Vocabulary::kSos);
        std::vector<bool> done(static_cast<std::size_t>(B), false);
        Var h = c.h0;
        for (int step = 0; step < max_steps; ++step) {
            Var logits;
            decode_step(t, c, batch, prev, h, logits, nullptr);
            std::vector<int> em = argmax_rows(t.val(logits));
            bool all_done = true;
            for (int b = 0; b < B; ++b) {
                auto bi = static_cast<std::size_t>(b);
                if (!done[bi]) {
                    out[bi].push_back(em[bi]);
                    if (em[bi] == Vocabulary::kEos) done[bi] = true;
                    prev[bi] = em[bi];
                }
                all_done = all_done && done[bi];
            }
            if (all_done) break;
        }
        return out;
    }

    /// Attention weights per decode step for one example (diagnostics/tests).
    std::vector<Eigen::VectorXd> attention_map(const std::vector<int>& src_ids,
                                               const std::vector<int>& forced_tgt) {
        if (!opt_.attention) throw std::logic_error("attention_map on a plain gru");
        Batch b = make_batch({src_ids}, {forced_tgt});
        Tape<S> t;
        t.grad_enabled = false;
        Ctx c = encode(t, b);
        std::vector<Eigen::VectorXd> maps;
        std::vector<int> prev{forced_tgt.front()};
        Var h = c.h0;
        for (int step = 0; step + 1 < b.tgt_cols(); ++step) {
            Var logits;
            Var w;
            decode_step(t, c, b, prev, h, logits, &w);
            maps.push_back(t.val(w).row(0).transpose().template cast<double>());
            prev[0] = forced_tgt[static_cast<std::size_t>(step + 1)];
        }
        return maps;
    }

private:
    struct Ctx {
        Var me, h0, attn_pre, mask_neg;
        Var embed, attn_w, attn_v, out_w, out_b;
        typename GruCell<S>::Lease dec;
        int L = 0;
    };

    Ctx encode(Tape<S>& t, const Batch& batch) {
        const int B = batch.rows(), L = batch.src_cols();
        Ctx c;
        c.L = L;
        c.embed = store_.lease(t, "embed");
        std::vector<Var> steps(static_cast<std::size_t>(L));
        for (int p = 0; p < L; ++p) {
            std::vector<int> ids(static_cast<std::size_t>(B));
            for (int b = 0; b < B; ++b) ids[static_cast<std::size_t>(b)] = batch.src(b, p);
            steps[static_cast<std::size_t>(p)] = t.rows_embed(c.embed, std::move(ids));
        }
        auto enc = enc_.forward(t, store_, steps);
        c.me = enc.me;
        c.h0 = enc.last;
        if (opt_.attention) {
            c.attn_pre = t.matmul(c.me, store_.lease(t, "attn.u"));
            c.attn_w = store_.lease(t, "attn.w");
            c.attn_v = store_.lease(t, "attn.v");
            c.mask_neg = t.constant(source_neg_mask<S>(batch));
        }
        c.out_w = store_.lease(t, "out.w");
        c.out_b = store_.lease(t, "out.b");
        c.dec = dec_.lease(t, store_);
        return c;
    }

    void decode_step(Tape<S>& t, const Ctx& c, const Batch& batch,
                     const std::vector<int>& prev, Var& h, Var& logits, Var* attn_out) {
        Var x = t.rows_embed(c.embed, prev);
        if (opt_.attention) {
            const int B = batch.rows();
            Var q = t.rep_rows(t.matmul(h, c.attn_w), c.L);
            Var scores = t.fold_rows(t.matmul(t.tanh_(t.add(c.attn_pre, q)), c.attn_v), B, c.L);
            Var w = t.softmax_rows(t.add(scores, c.mask_neg));
            if (attn_out) *attn_out = w;
            x = t.concat_cols(x, t.weighted_context(c.me, w));
        }
        h = GruCell<S>::step(t, c.dec, x, h);
        logits = t.linear(h, c.out_w, c.out_b);
    }

    DataShape shape_;
    Options opt_;
    ParameterStore<S> store_;
    BidirGruEncoder<S> enc_;
    GruCell<S> dec_;
};

} // namespace permnet
