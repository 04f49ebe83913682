#pragma once

// Indirect-permutation architecture: role classification of every source
// position into {not-relevant, data, key, query}, association matrices
// M_dk / M_kp / M_dp built through mlog-softmax, pointer logits through
// M_dp, and the back-mapping attention that turns the previously emitted
// token into query-side attention. Optionally pairs with a CopyNet head,
// with race masking between the two feedback paths.

#include "permnet/gru.hpp"
#include "permnet/model.hpp"
#include "permnet/rng.hpp"

#include <optional>

namespace permnet {

struct AssociationTrace {
    Eigen::MatrixXd m_label;  // L x 4 (empty when roles are ablated away)
    Eigen::MatrixXd m_dk;     // L x L
    Eigen::MatrixXd m_kp;     // L x L
    Eigen::MatrixXd m_dp;     // L x L
};

struct IndirectStepTrace {
    Eigen::VectorXd v_pw;        // L
    Eigen::VectorXd v_dw;        // L
    Eigen::VectorXd v_selected;  // L
    Eigen::VectorXd context;     // 2H (zero-length when attention is ablated)
    Eigen::VectorXd v_vocab;     // V
    Eigen::VectorXd logits;      // V
    int emitted = -1;
};

struct IndirectTrace {
    AssociationTrace assoc;
    std::vector<IndirectStepTrace> steps;
};

template <class S>
class PermNetI final : public SeqModel<S> {
public:
    struct Options {
        int emb = 128;
        int hidden = 32;
        bool with_copynet = false;  // combined copynet+permnet-i model
        bool no_fixed_vocab = false;
        bool no_mdmkmp = false;
        bool no_md = false;
        bool no_attention = false;
        bool no_mpl = false;
        bool plain_softmax = false;
        bool hidden_mix = false;    // mix context into the hidden state instead
                                    // of concatenating it to the decoder input
    };

    PermNetI(DataShape shape, Options opt) : shape_(shape), opt_(opt) {
        const int E = opt_.emb, H = opt_.hidden, V = shape_.vocab_size;
        const int Lmax = shape_.max_src_len;
        store_.add("embed", V, E);
        enc_.prefix = "enc";
        enc_.add_params(store_, E, H);
        if (!opt_.no_mdmkmp) {
            store_.add("role.w", 2 * H, 4);
            store_.add("role.b", 1, 4);
        }
        if (opt_.no_mpl) {
            store_.add("pwl.w", H, Lmax);
            store_.add("pwl.b", 1, Lmax);
        } else {
            store_.add("pw_m.w", 2 * H, H);
            store_.add("pw_m.b", 1, H);
            store_.add("pw_h.w", H, H);
            store_.add("pw_h.b", 1, H);
        }
        if (!opt_.no_fixed_vocab) {
            store_.add("vocab.w", H, V);
            store_.add("vocab.b", 1, V);
        }
        if (opt_.with_copynet) store_.add("copy.w", 2 * H, H);
        int dec_in = E;
        if (!opt_.no_attention && !opt_.hidden_mix) dec_in += 2 * H;
        if (opt_.with_copynet) dec_in += 2 * H;
        dec_.prefix = "dec";
        dec_.add_params(store_, dec_in, H);
        if (!opt_.no_attention && opt_.hidden_mix) {
            store_.add("mix.w", 3 * H, H);
            store_.add("mix.b", 1, H);
        }
    }

    void init(Rng& rng) {
        const int E = opt_.emb, H = opt_.hidden;
        init_uniform(store_.at("embed"), E, rng);
        enc_.init(store_, rng);
        dec_.init(store_, rng);
        if (!opt_.no_mdmkmp) {
            init_uniform(store_.at("role.w"), 2 * H, rng);
            init_uniform(store_.at("role.b"), 2 * H, rng);
        }
        if (opt_.no_mpl) {
            init_uniform(store_.at("pwl.w"), H, rng);
            init_uniform(store_.at("pwl.b"), H, rng);
        } else {
            init_uniform(store_.at("pw_m.w"), 2 * H, rng);
            init_uniform(store_.at("pw_m.b"), 2 * H, rng);
            init_uniform(store_.at("pw_h.w"), H, rng);
            init_uniform(store_.at("pw_h.b"), H, rng);
        }
        if (!opt_.no_fixed_vocab) {
            init_uniform(store_.at("vocab.w"), H, rng);
            init_uniform(store_.at("vocab.b"), H, rng);
        }
        if (opt_.with_copynet) init_uniform(store_.at("copy.w"), 2 * H, rng);
        if (!opt_.no_attention && opt_.hidden_mix) {
            init_uniform(store_.at("mix.w"), 3 * H, rng);
            init_uniform(store_.at("mix.b"), 3 * H, rng);
        }
    }

    std::string kind() const override {
        return opt_.with_copynet ? "copynet+permnet-i" : "permnet-i";
    }
    ParameterStore<S>& params() override { return store_; }
    const Options& options() const { return opt_; }
    const DataShape& shape() const { return shape_; }

    LossInfo loss(Tape<S>& t, const Batch& batch, bool teacher = true) override {
        Ctx c = encode(t, batch);
        const int T = batch.tgt_cols();
        LossInfo info;
        std::vector<int> prev = target_column(batch, 0);
        Var h = c.h0;
        Feedback fb;
        for (int step = 0; step + 1 < T; ++step) {
            Var logits;
            decode_step(t, c, batch, prev, step, h, fb, logits);
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
        Feedback fb;
        for (int step = 0; step < max_steps; ++step) {
            Var logits;
            decode_step(t, c, batch, prev, step, h, fb, logits);
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

    IndirectTrace trace(const std::vector<int>& src_ids,
                        const std::optional<std::vector<int>>& forced = std::nullopt,
                        int max_steps = 0) {
        Batch b = make_batch({src_ids}, {forced ? *forced : std::vector<int>{Vocabulary::kSos}});
        Tape<S> t;
        t.grad_enabled = false;
        Ctx c = encode(t, b);
        const int L = b.src_cols();
        IndirectTrace tr;
        if (c.role_probs.valid())
            tr.assoc.m_label = t.val(c.role_probs).template cast<double>();
        tr.assoc.m_dk = t.val(c.m_dk).template cast<double>();
        tr.assoc.m_kp = t.val(c.m_kp).template cast<double>();
        tr.assoc.m_dp = t.val(c.m_dp).template cast<double>();
        const int steps = forced ? b.tgt_cols() - 1
                                 : (max_steps > 0 ? max_steps : b.src_len[0] + 2);
        std::vector<int> prev{Vocabulary::kSos};
        Var h = c.h0;
        Feedback fb;
        for (int step = 0; step < steps; ++step) {
            Var logits;
            StepVars sv = decode_step(t, c, b, prev, step, h, fb, logits);
            IndirectStepTrace st;
            st.v_pw = t.val(sv.vpw).row(0).transpose().template cast<double>();
            st.v_dw = t.val(sv.vdw).row(0).transpose().template cast<double>();
            if (sv.vsel.valid())
                st.v_selected = t.val(sv.vsel).row(0).transpose().template cast<double>();
            else
                st.v_selected = Eigen::VectorXd::Zero(L);
            if (sv.ctx.valid())
                st.context = t.val(sv.ctx).row(0).transpose().template cast<double>();
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
        Var me;          // (B*L) x 2H
        Var h0;          // B x H
        Var role_probs;  // (B*L) x 4 (invalid under no_mdmkmp)
        Var m_dk, m_kp, m_dp;  // (B*L) x L
        Var mp_lin;      // (B*L) x H precomputed Lin(M_p) (invalid under no_mpl)
        Var mask01, maskneg;   // B x L constants
        Var embed, pwl_w, pwl_b, pw_h_w, pw_h_b, vocab_w, vocab_b, mix_w, mix_b;
        Var copy_proj;   // (B*L) x H tanh(M_e W_c) (combined mode)
        typename GruCell<S>::Lease dec;
    };

    struct Feedback {
        Var vdw;              // previous step's v_dw
        Var copy_dist;        // previous step's copy softmax (combined mode)
        Mat<S> perm_keep;     // race masks computed from previous values
        Mat<S> copy_keep;
    };

    struct StepVars {
        Var vpw, vdw, vsel, ctx, vvocab;
    };

    /// 0/1 mask zeroing the main diagonal and all padding rows/columns of a
    /// stacked (B*L) x L per-example matrix.
    static Mat<S> diag_pad_mask(const Batch& batch) {
        const int B = batch.rows(), L = batch.src_cols();
        Mat<S> m = Mat<S>::Zero(Eigen::Index(B) * L, L);
        for (int b = 0; b < B; ++b) {
            const int n = batch.src_len[static_cast<std::size_t>(b)];
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    if (i != j) m(Eigen::Index(b) * L + i, j) = S(1);
        }
        return m;
    }

    Ctx encode(Tape<S>& t, const Batch& batch) {
        const int B = batch.rows(), L = batch.src_cols(), H = opt_.hidden;
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
        c.maskneg = t.constant(source_neg_mask<S>(batch));

        Var d = c.me, k = c.me, p = c.me;
        if (!opt_.no_mdmkmp) {
            c.role_probs = t.softmax_rows(
                t.linear(c.me, store_.lease(t, "role.w"), store_.lease(t, "role.b")));
            d = t.cmul_colvec(c.me, t.slice_cols(c.role_probs, 1, 1));
            k = t.cmul_colvec(c.me, t.slice_cols(c.role_probs, 2, 1));
            p = t.cmul_colvec(c.me, t.slice_cols(c.role_probs, 3, 1));
        }
        if (opt_.no_md) d = c.me;

        Var zmask = t.constant(diag_pad_mask(batch));
        auto assoc_rows = [&](Var left, Var right) {
            Var raw = t.bmm_nt(left, right, L, L);
            Var soft = opt_.plain_softmax ? t.softmax_rows(raw) : t.mlog_softmax_rows(raw);
            return t.cmul(soft, zmask);
        };
        c.m_dk = assoc_rows(d, k);
        c.m_kp = assoc_rows(k, p);
        c.m_dp = t.bmm_nn(c.m_dk, c.m_kp, L, L);

        if (opt_.no_mpl) {
            c.pwl_w = store_.lease(t, "pwl.w");
            c.pwl_b = store_.lease(t, "pwl.b");
        } else {
            c.mp_lin = t.linear(p, store_.lease(t, "pw_m.w"), store_.lease(t, "pw_m.b"));
            c.pw_h_w = store_.lease(t, "pw_h.w");
            c.pw_h_b = store_.lease(t, "pw_h.b");
        }
        if (!opt_.no_fixed_vocab) {
            c.vocab_w = store_.lease(t, "vocab.w");
            c.vocab_b = store_.lease(t, "vocab.b");
        }
        if (opt_.with_copynet)
            c.copy_proj = t.tanh_(t.matmul(c.me, store_.lease(t, "copy.w")));
        if (!opt_.no_attention && opt_.hidden_mix) {
            c.mix_w = store_.lease(t, "mix.w");
            c.mix_b = store_.lease(t, "mix.b");
        }
        c.dec = dec_.lease(t, store_);
        (void)H;
        return c;
    }

    /// 0/1 mask over source positions holding the token fed at this step.
    static Mat<S> emitted_mask(const Batch& batch, const std::vector<int>& prev) {
        const int B = batch.rows(), L = batch.src_cols();
        Mat<S> m = Mat<S>::Zero(B, L);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < batch.src_len[static_cast<std::size_t>(b)]; ++t)
                if (batch.src(b, t) == prev[static_cast<std::size_t>(b)]) m(b, t) = S(1);
        return m;
    }

    StepVars decode_step(Tape<S>& t, const Ctx& c, const Batch& batch,
                         const std::vector<int>& prev, int step, Var& h, Feedback& fb,
                         Var& logits) {
        const int B = batch.rows(), L = batch.src_cols();
        StepVars sv;

        // --- feedback from the previous step -----------------------------
        Var ctx, rho;
        if (!opt_.no_attention) {
            Var qw;
            if (step == 0 || !fb.vdw.valid()) {
                qw = t.constant(Mat<S>::Zero(B, L));
            } else {
                sv.vsel = t.cmul(fb.vdw, t.constant(emitted_mask(batch, prev)));
                if (opt_.with_copynet)
                    sv.vsel = t.cmul(sv.vsel, t.constant(fb.perm_keep));
                Var attn_w = t.scale_rows(c.m_dp, sv.vsel);
                qw = t.colsum_blocks(attn_w, L);
            }
            Var qsoft = t.softmax_rows(t.add(qw, c.maskneg));
            ctx = t.weighted_context(c.me, qsoft);
            sv.ctx = ctx;
        }
        if (opt_.with_copynet) {
            if (step == 0 || !fb.copy_dist.valid()) {
                rho = t.constant(Mat<S>::Zero(B, 2 * opt_.hidden));
            } else {
                Var w = t.cmul(fb.copy_dist, t.constant(emitted_mask(batch, prev)));
                w = t.cmul(w, t.constant(fb.copy_keep));
                rho = t.weighted_context(c.me, t.normalize_rows(w, S(1e-12)));
            }
        }

        // --- decoder cell --------------------------------------------------
        Var x = t.rows_embed(c.embed, prev);
        if (ctx.valid() && !opt_.hidden_mix) x = t.concat_cols(x, ctx);
        if (rho.valid()) x = t.concat_cols(x, rho);
        h = GruCell<S>::step(t, c.dec, x, h);
        Var hq = h;
        if (ctx.valid() && opt_.hidden_mix)
            hq = t.tanh_(t.linear(t.concat_cols(h, ctx), c.mix_w, c.mix_b));

        // --- pointer logits -------------------------------------------------
        if (opt_.no_mpl)
            sv.vpw = t.slice_cols(t.linear(hq, c.pwl_w, c.pwl_b), 0, L);
        else
            sv.vpw = t.attn_scores(c.mp_lin, t.linear(hq, c.pw_h_w, c.pw_h_b));
        sv.vdw = t.bmv(c.m_dp, sv.vpw);
        logits = t.scatter_tokens(sv.vdw, batch.src, shape_.vocab_size, batch.src_len);

        Var psi;
        if (opt_.with_copynet) {
            psi = t.attn_scores(c.copy_proj, hq);
            logits = t.add(logits, t.scatter_tokens(psi, batch.src, shape_.vocab_size,
                                                    batch.src_len));
        }
        if (!opt_.no_fixed_vocab) {
            sv.vvocab = t.linear(hq, c.vocab_w, c.vocab_b);
            logits = t.add(logits, sv.vvocab);
        }

        // --- stash feedback for the next step -------------------------------
        fb.vdw = sv.vdw;
        if (opt_.with_copynet) {
            fb.copy_dist = t.softmax_rows(t.add(psi, c.maskneg));
            // Race masking: each source position feeds exactly one mechanism
            // next step; ties go to the permutation path.
            const Mat<S>& dw = t.val(sv.vdw);
            const Mat<S>& cs = t.val(psi);
            fb.perm_keep = (dw.array() >= cs.array()).template cast<S>();
            fb.copy_keep = S(1) - fb.perm_keep.array();
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
