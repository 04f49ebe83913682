#pragma once

// Direct-permutation architecture: an array-start pointer (v_arr), a learned
// index embedding, and the antidiagonal accumulation that turns "start s,
// offset j" into source position s+j, summed with a fixed-vocabulary head.

#include "permnet/gru.hpp"
#include "permnet/model.hpp"
#include "permnet/rng.hpp"

#include <optional>

namespace permnet {

struct DirectStepTrace {
    Eigen::VectorXd v_attn;   // L
    Eigen::VectorXd v_ind;    // K_max
    Eigen::MatrixXd m_prob;   // L x K_max
    Eigen::VectorXd v_perm;   // V
    Eigen::VectorXd v_vocab;  // V
    Eigen::VectorXd logits;   // V
    int emitted = -1;
};

struct DirectTrace {
    Eigen::VectorXd v_arr;    // L (zero-length when the ablation removes it)
    std::vector<DirectStepTrace> steps;
};

template <class S>
class PermNetD final : public SeqModel<S> {
public:
    struct Options {
        int emb = 64;
        int hidden = 32;
        bool no_fixed_vocab = false;
        bool no_me = false;
        bool no_mind = false;
        bool no_varr = false;
        bool normalize_attention = false;  // equations use raw scores; off by default
        S index_decay = S(1e-3);
    };

    PermNetD(DataShape shape, Options opt) : shape_(shape), opt_(opt) {
        const int E = opt_.emb, H = opt_.hidden, V = shape_.vocab_size;
        const int K = shape_.k_max, Lmax = shape_.max_src_len;
        if (K < 1) throw std::invalid_argument("permnet-d needs k_max >= 1");
        store_.add("embed", V, E);
        enc_.prefix = "enc";
        enc_.add_params(store_, E, H);
        dec_.prefix = "dec";
        dec_.add_params(store_, E, H);
        if (opt_.no_me) {
            store_.add("attn.w", H, Lmax);
            store_.add("attn.b", 1, Lmax);
        } else {
            store_.add("attn.w", H, 2 * H);
            store_.add("attn.b", 1, 2 * H);
        }
        if (!opt_.no_mind) {
            auto& e = store_.add("index_embed", V, K);
            e.weight_decay = opt_.index_decay;
            if (opt_.no_varr) {
                store_.add("start.w", K, Lmax);
                store_.add("start.b", 1, Lmax);
            } else {
                store_.add("arr.w", 2 * H, 1);
                store_.add("arr.b", 1, 1);
            }
        }
        if (!opt_.no_fixed_vocab) {
            store_.add("vocab.w", H, V);
            store_.add("vocab.b", 1, V);
        }
    }

    void init(Rng& rng) {
        const int E = opt_.emb, H = opt_.hidden;
        init_uniform(store_.at("embed"), E, rng);
        enc_.init(store_, rng);
        dec_.init(store_, rng);
        init_uniform(store_.at("attn.w"), H, rng);
        init_uniform(store_.at("attn.b"), H, rng);
        if (!opt_.no_mind) {
            init_uniform(store_.at("index_embed"), shape_.k_max, rng);
            if (opt_.no_varr) {
                init_uniform(store_.at("start.w"), shape_.k_max, rng);
                init_uniform(store_.at("start.b"), shape_.k_max, rng);
            } else {
                init_uniform(store_.at("arr.w"), 2 * H, rng);
                init_uniform(store_.at("arr.b"), 2 * H, rng);
            }
        }
        if (!opt_.no_fixed_vocab) {
            init_uniform(store_.at("vocab.w"), H, rng);
            init_uniform(store_.at("vocab.b"), H, rng);
        }
    }

    std::string kind() const override { return "permnet-d"; }
    ParameterStore<S>& params() override { return store_; }
    const Options& options() const { return opt_; }
    const DataShape& shape() const { return shape_; }

    LossInfo loss(Tape<S>& t, const Batch& batch, bool teacher = true) override {
        Ctx c = encode(t, batch);
        const int T = batch.tgt_cols();
        LossInfo info;
        std::vector<int> prev = target_column(batch, 0);
        Var h = c.h0;
        for (int step = 0; step + 1 < T; ++step) {
            Var logits;
            decode_step(t, c, batch, prev, h, logits);
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
            decode_step(t, c, batch, prev, h, logits);
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

    /// Single-example diagnostic forward. When forced_targets is set the
    /// decoder is teacher-forced through them; otherwise it free-runs.
    DirectTrace trace(const std::vector<int>& src_ids,
                      const std::optional<std::vector<int>>& forced = std::nullopt,
                      int max_steps = 0) {
        Batch b = make_batch({src_ids}, {forced ? *forced : std::vector<int>{Vocabulary::kSos}});
        Tape<S> t;
        t.grad_enabled = false;
        Ctx c = encode(t, b);
        const int L = b.src_cols();
        DirectTrace tr;
        if (c.varr.valid())
            tr.v_arr = t.val(c.varr).row(0).transpose().template cast<double>();
        const int steps = forced ? b.tgt_cols() - 1
                                 : (max_steps > 0 ? max_steps : b.src_len[0] + 2);
        std::vector<int> prev{Vocabulary::kSos};
        Var h = c.h0;
        for (int step = 0; step < steps; ++step) {
            Var logits;
            StepVars sv = decode_step(t, c, b, prev, h, logits);
            DirectStepTrace st;
            st.v_attn = t.val(sv.vattn).row(0).transpose().template cast<double>();
            if (sv.vind.valid())
                st.v_ind = t.val(sv.vind).row(0).transpose().template cast<double>();
            else
                st.v_ind = Eigen::VectorXd::Zero(shape_.k_max);
            if (c.varr.valid())
                st.m_prob = tr.v_arr * st.v_ind.transpose();
            else
                st.m_prob = Eigen::MatrixXd::Zero(L, shape_.k_max);
            st.v_perm = t.val(sv.vperm).row(0).transpose().template cast<double>();
            if (sv.vvocab.valid())
                st.v_vocab = t.val(sv.vvocab).row(0).transpose().template cast<double>();
            else
                st.v_vocab = Eigen::VectorXd::Zero(shape_.vocab_size);
            st.logits = t.val(logits).row(0).transpose().template cast<double>();
            st.emitted = argmax_rows(t.val(logits))[0];
            tr.steps.push_back(std::move(st));
            prev[0] = forced ? (*forced)[static_cast<std::size_t>(step + 1)] : tr.steps.back().emitted;
            if (!forced && tr.steps.back().emitted == Vocabulary::kEos) break;
        }
        return tr;
    }

private:
    struct Ctx {
        Var me;       // (B*L) x 2H
        Var h0;       // B x H
        Var varr;     // B x L, invalid under no_mind / no_varr
        Var mask01;   // B x L constant pad mask
        Var embed, attn_w, attn_b, index_embed, start_w, start_b, vocab_w, vocab_b;
        typename GruCell<S>::Lease dec;
    };

    struct StepVars {
        Var vattn, vind, vperm, vvocab;
    };

    Ctx encode(Tape<S>& t, const Batch& batch) {
        const int B = batch.rows(), L = batch.src_cols();
        if (L > shape_.max_src_len)
            throw std::invalid_argument("source longer than the configured maximum");
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
        c.mask01 = t.constant(source_pad_mask<S>(batch));
        c.attn_w = store_.lease(t, "attn.w");
        c.attn_b = store_.lease(t, "attn.b");
        if (!opt_.no_mind) {
            c.index_embed = store_.lease(t, "index_embed");
            if (opt_.no_varr) {
                c.start_w = store_.lease(t, "start.w");
                c.start_b = store_.lease(t, "start.b");
            } else {
                Var w = store_.lease(t, "arr.w");
                Var b = store_.lease(t, "arr.b");
                // An array base is only meaningful at content positions;
                // delimiter tokens are gated out of the pointer.
                Mat<S> content = source_pad_mask<S>(batch);
                for (int bi = 0; bi < B; ++bi)
                    for (int p = 0; p < L; ++p) {
                        const int id = batch.src(bi, p);
                        if (id == Vocabulary::kSos || id == Vocabulary::kSep ||
                            id == Vocabulary::kEos)
                            content(bi, p) = S(0);
                    }
                c.varr = t.cmul(t.fold_rows(t.linear(c.me, w, b), B, L),
                                t.constant(std::move(content)));
            }
        }
        if (!opt_.no_fixed_vocab) {
            c.vocab_w = store_.lease(t, "vocab.w");
            c.vocab_b = store_.lease(t, "vocab.b");
        }
        c.dec = dec_.lease(t, store_);
        return c;
    }

    StepVars decode_step(Tape<S>& t, const Ctx& c, const Batch& batch,
                         const std::vector<int>& prev, Var& h, Var& logits) {
        const int L = batch.src_cols();
        Var x = t.rows_embed(c.embed, prev);
        h = GruCell<S>::step(t, c.dec, x, h);
        StepVars sv;
        if (opt_.no_me)
            sv.vattn = t.slice_cols(t.linear(h, c.attn_w, c.attn_b), 0, L);
        else
            sv.vattn = t.attn_scores(c.me, t.linear(h, c.attn_w, c.attn_b));
        if (opt_.normalize_attention) sv.vattn = t.softmax_rows(sv.vattn);
        sv.vattn = t.cmul(sv.vattn, c.mask01);
        Var posw;
        if (opt_.no_mind) {
            posw = sv.vattn;
        } else {
            sv.vind = t.index_weighted_sum(c.index_embed, sv.vattn, batch.src, batch.src_len);
            if (opt_.no_varr)
                posw = t.slice_cols(t.linear(sv.vind, c.start_w, c.start_b), 0, L);
            else
                posw = t.antidiag_outer(c.varr, sv.vind);
        }
        sv.vperm = t.scatter_tokens(posw, batch.src, shape_.vocab_size, batch.src_len);
        logits = sv.vperm;
        if (!opt_.no_fixed_vocab) {
            sv.vvocab = t.linear(h, c.vocab_w, c.vocab_b);
            logits = t.add(logits, sv.vvocab);
        }
        return sv;
    }

    DataShape shape_;
    Options opt_;
    ParameterStore<S> store_;
    BidirGruEncoder<S> enc_;
    GruCell<S> dec_;
};

} // namespace permnet
