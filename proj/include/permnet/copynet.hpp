#pragma once

// CopyNet baseline: generate-mode and copy-mode heads whose logits are added
// per token (copy scores scattered over the source positions holding the
// token), with the previous step's copy distribution fed back into the
// decoder input as an averaged selective read.

#include "permnet/gru.hpp"
#include "permnet/model.hpp"
#include "permnet/rng.hpp"

namespace permnet {

template <class S>
class CopyNet final : public SeqModel<S> {
public:
    struct Options {
        int emb = 64;
        int hidden = 64;
        std::string copy_score = "tanh";       // recorded; tanh is the implemented form
        std::string selective_read = "average";
    };

    CopyNet(DataShape shape, Options opt) : shape_(shape), opt_(opt) {
        const int E = opt_.emb, H = opt_.hidden, V = shape_.vocab_size;
        store_.add("embed", V, E);
        enc_.prefix = "enc";
        enc_.add_params(store_, E, H);
        dec_.prefix = "dec";
        dec_.add_params(store_, E + 2 * H, H);
        store_.add("copy.w", 2 * H, H);
        store_.add("gen.w", H, V);
        store_.add("gen.b", 1, V);
    }

    void init(Rng& rng) {
        const int E = opt_.emb, H = opt_.hidden;
        init_uniform(store_.at("embed"), E, rng);
        enc_.init(store_, rng);
        dec_.init(store_, rng);
        init_uniform(store_.at("copy.w"), 2 * H, rng);
        init_uniform(store_.at("gen.w"), H, rng);
        init_uniform(store_.at("gen.b"), H, rng);
    }

    std::string kind() const override { return "copynet"; }
    ParameterStore<S>& params() override { return store_; }
    const Options& options() const { return opt_; }

    LossInfo loss(Tape<S>& t, const Batch& batch, bool teacher = true) override {
        Ctx c = encode(t, batch);
        const int T = batch.tgt_cols();
        LossInfo info;
        std::vector<int> prev = target_column(batch, 0);
        Var h = c.h0, prev_dist;
        for (int step = 0; step + 1 < T; ++step) {
            Var logits;
            decode_step(t, c, batch, prev, step, h, prev_dist, logits);
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
        Var h = c.h0, prev_dist;
        for (int step = 0; step < max_steps; ++step) {
            Var logits;
            decode_step(t, c, batch, prev, step, h, prev_dist, logits);
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

    /// One decode step's raw pieces on a single example (for the scatter
    /// oracle and distribution tests).
    struct Probe {
        Eigen::VectorXd copy_scores;  // L
        Eigen::VectorXd gen_logits;   // V
        Eigen::VectorXd logits;       // V
    };
    Probe probe_first_step(const std::vector<int>& src_ids) {
        Batch b = make_batch({src_ids}, {{Vocabulary::kSos}});
        Tape<S> t;
        t.grad_enabled = false;
        Ctx c = encode(t, b);
        std::vector<int> prev{Vocabulary::kSos};
        Var h = c.h0, prev_dist, logits;
        decode_step(t, c, b, prev, 0, h, prev_dist, logits);
        Probe p;
        p.copy_scores = t.val(last_psi_).row(0).transpose().template cast<double>();
        p.gen_logits = t.val(last_gen_).row(0).transpose().template cast<double>();
        p.logits = t.val(logits).row(0).transpose().template cast<double>();
        return p;
    }

private:
    struct Ctx {
        Var me, h0, copy_proj, mask_neg;
        Var embed, gen_w, gen_b;
        typename GruCell<S>::Lease dec;
    };

    Ctx encode(Tape<S>& t, const Batch& batch) {
        const int B = batch.rows(), L = batch.src_cols();
        Ctx c;
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
        c.copy_proj = t.tanh_(t.matmul(c.me, store_.lease(t, "copy.w")));
        c.mask_neg = t.constant(source_neg_mask<S>(batch));
        c.gen_w = store_.lease(t, "gen.w");
        c.gen_b = store_.lease(t, "gen.b");
        c.dec = dec_.lease(t, store_);
        return c;
    }

    static Mat<S> emitted_mask(const Batch& batch, const std::vector<int>& prev) {
        const int B = batch.rows(), L = batch.src_cols();
        Mat<S> m = Mat<S>::Zero(B, L);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < batch.src_len[static_cast<std::size_t>(b)]; ++t)
                if (batch.src(b, t) == prev[static_cast<std::size_t>(b)]) m(b, t) = S(1);
        return m;
    }

    void decode_step(Tape<S>& t, const Ctx& c, const Batch& batch,
                     const std::vector<int>& prev, int step, Var& h, Var& prev_dist,
                     Var& logits) {
        const int B = batch.rows(), H = opt_.hidden;
        Var rho;
        if (step == 0 || !prev_dist.valid()) {
            rho = t.constant(Mat<S>::Zero(B, 2 * H));
        } else {
            Var w = t.cmul(prev_dist, t.constant(emitted_mask(batch, prev)));
            rho = t.weighted_context(c.me, t.normalize_rows(w, S(1e-12)));
        }
        Var x = t.concat_cols(t.rows_embed(c.embed, prev), rho);
        h = GruCell<S>::step(t, c.dec, x, h);
        Var psi = t.attn_scores(c.copy_proj, h);
        Var gen = t.linear(h, c.gen_w, c.gen_b);
        logits = t.add(gen, t.scatter_tokens(psi, batch.src, shape_.vocab_size, batch.src_len));
        prev_dist = t.softmax_rows(t.add(psi, c.mask_neg));
        last_psi_ = psi;
        last_gen_ = gen;
    }

    DataShape shape_;
    Options opt_;
    ParameterStore<S> store_;
    BidirGruEncoder<S> enc_;
    GruCell<S> dec_;
    Var last_psi_, last_gen_;
};

} // namespace permnet
