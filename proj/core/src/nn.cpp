#include "sigattn/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <stdexcept>
#include <string>

#include "sigattn/flash.hpp"
#include "sigattn/theory.hpp"

namespace sigattn {

namespace {

constexpr double kLnEps = 1e-5;   // residual-stream LayerNorm epsilon
constexpr double kQkEps = 1e-6;   // query/key LayerNorm epsilon
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kPi = 3.14159265358979323846;

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

double logistic(double x) { return sigmoid_via_tanh(x); }

// ---- small matrix helpers -------------------------------------------------

Matrix slice(const Matrix& m, int r0, int r1, int c0, int c1) {
    Matrix out(r1 - r0, c1 - c0);
    for (int i = r0; i < r1; ++i) {
        const double* src = m.row(i);
        double* dst = out.row(i - r0);
        for (int j = c0; j < c1; ++j) dst[j - c0] = src[j];
    }
    return out;
}

void paste(Matrix& dst, const Matrix& src, int r0, int c0) {
    for (int i = 0; i < src.rows; ++i) {
        const double* s = src.row(i);
        double* d = dst.row(r0 + i);
        for (int j = 0; j < src.cols; ++j) d[c0 + j] = s[j];
    }
}

void add_inplace(Matrix& a, const Matrix& b) {
    for (size_t e = 0; e < a.data.size(); ++e) a.data[e] += b.data[e];
}

// x (N x d) scaled per column by row (1 x d)
Matrix mul_bcast(const Matrix& x, const Matrix& row) {
    Matrix out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double* oi = out.row(i);
        for (int j = 0; j < x.cols; ++j) oi[j] = xi[j] * row.at(0, j);
    }
    return out;
}

void accum_rowsum_prod(Matrix& out, const Matrix& a, const Matrix& b) {
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        const double* bi = b.row(i);
        for (int j = 0; j < a.cols; ++j) out.at(0, j) += ai[j] * bi[j];
    }
}

void accum_colsum(Matrix& out, const Matrix& a) {
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        for (int j = 0; j < a.cols; ++j) out.at(0, j) += ai[j];
    }
}

// ---- layer norm -----------------------------------------------------------

Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, double eps) {
    Matrix y(x.rows, x.cols);
    const int d = x.cols;
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) yi[j] = (xi[j] - mu) * inv * g.at(0, j) + b.at(0, j);
    }
    return y;
}

// Accumulates into *dg / *db when non-null and returns dx.
Matrix layer_norm_backward(const Matrix& x, const Matrix& g, double eps, const Matrix& dY,
                           Matrix* dg, Matrix* db) {
    Matrix dx(x.rows, x.cols);
    const int d = x.cols;
    std::vector<double> xhat(static_cast<size_t>(d));
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        const double* dyi = dY.row(i);
        double* dxi = dx.row(i);
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
        for (int j = 0; j < d; ++j) {
            xhat[static_cast<size_t>(j)] = (xi[j] - mu) * inv;
            const double dxh = dyi[j] * g.at(0, j);
            m1 += dxh;
            m2 += dxh * xhat[static_cast<size_t>(j)];
        }
        m1 /= d;
        m2 /= d;
        for (int j = 0; j < d; ++j) {
            const double dxh = dyi[j] * g.at(0, j);
            dxi[j] = inv * (dxh - m1 - xhat[static_cast<size_t>(j)] * m2);
            if (dg) dg->at(0, j) += dyi[j] * xhat[static_cast<size_t>(j)];
            if (db) db->at(0, j) += dyi[j];
        }
    }
    return dx;
}

// ---- positional table -----------------------------------------------------

Matrix sincos_table(int tokens, int d) {
    Matrix p(tokens, d);
    for (int t = 0; t < tokens; ++t) {
        for (int c = 0; c < d; ++c) {
            const int k = c / 2;
            const double angle = t * std::pow(10000.0, -2.0 * k / d);
            p.at(t, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return p;
}

// ---- kernel configuration --------------------------------------------------

AttnConfig kernel_cfg(const ModelConfig& mc, double learnable_bias, int head) {
    AttnConfig k;
    k.activation = mc.activation;
    switch (mc.bias.mode) {
        case BiasSpec::Mode::none: k.bias = BiasSpec::none(); break;
        case BiasSpec::Mode::constant: k.bias = BiasSpec::constant(mc.bias.value); break;
        case BiasSpec::Mode::neg_log_n: k.bias = BiasSpec::neg_log_n(); break;
        case BiasSpec::Mode::neg_log_rowlen: k.bias = BiasSpec::neg_log_rowlen(); break;
        case BiasSpec::Mode::learnable: k.bias = BiasSpec::learnable(learnable_bias); break;
    }
    k.alpha = mc.alpha;
    k.causal = mc.causal;
    if (mc.pos == PosEmbed::alibi) k.pos_bias = PosBias::alibi(mc.n_heads, head);
    return k;
}

std::string lname(int layer, const char* suffix) {
    return "L" + std::to_string(layer) + "." + suffix;
}

// ---- forward cache ----------------------------------------------------------

struct BlockCache {
    Matrix x_in;                   // block input, (B*T) x d
    Matrix u;                      // after first layer norm
    Matrix q_all, k_all, v_all;    // projections, (B*T) x d
    std::vector<Matrix> Qk, Kk, Vk;  // kernel inputs per (sample, head), T x dh
    Matrix cat;                    // concatenated head outputs
    Matrix ao;                     // after the output projection
    Matrix x_mid;                  // after the attention residual
    Matrix m;                      // after second layer norm
    Matrix h1;                     // MLP pre-activation
    Matrix g1;                     // MLP post-activation
    Matrix mo;                     // MLP output
};

struct RunCache {
    std::vector<BlockCache> blocks;
    Matrix x_final;  // residual stream after the last block
    Matrix f;        // after the final layer norm
    Matrix pool;     // B x d mean-pooled features
    std::vector<double> predictions;
    double loss = 0.0;
    std::vector<double> dpred;  // d(loss)/d(prediction)
};

std::vector<double> qk_gain_segment(const Matrix& gain, int head, int dh) {
    std::vector<double> g(static_cast<size_t>(dh));
    for (int j = 0; j < dh; ++j) g[static_cast<size_t>(j)] = gain.at(0, head * dh + j);
    return g;
}

void check_batch(const ModelParams& P, const TaskBatch& batch) {
    require(batch.kind == P.task.kind, "model: batch task kind does not match the model task");
    require(batch.inputs.rows >= 1, "model: empty batch");
    require(batch.inputs.cols == (P.task.kind == TaskKind::ksum ? 2 * P.task.ksum_n
                                                                : P.task.max_len),
            "model: batch feature width does not match the task");
    require(batch.targets.size() == static_cast<size_t>(batch.inputs.rows),
            "model: one target per batch row required");
}

// Forward pass; fills the cache. When want_attn is set, fwd->attn gets the
// post-activation attention matrices per layer and (sample, head).
void forward_pass(const ModelParams& P, const TaskBatch& batch, bool want_attn,
                  RunCache& rc, ForwardResult* fwd) {
    const ModelConfig& mc = P.model;
    const int B = batch.inputs.rows;
    const int T = P.task.tokens();
    const int d = mc.d_model;
    const int H = mc.n_heads;
    const int dh = d / H;

    // ---- embedding ----
    Matrix x(B * T, d);
    if (P.task.kind == TaskKind::ksum) {
        const Matrix& We = P.tensor("embed.W");  // 1 x d; token t carries scalar s_t
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < T; ++t) {
                const double s = batch.inputs.at(b, t);
                double* row = x.row(b * T + t);
                for (int c = 0; c < d; ++c) row[c] = s * We.at(0, c);
            }
        }
    } else {
        const Matrix& E = P.tensor("embed.W");  // (vocab+1) x d lookup
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < T; ++t) {
                const double sv = batch.inputs.at(b, t);
                const int sym = static_cast<int>(sv);
                require(sv == sym && sym >= 0 && sym < E.rows,
                        "model: symbol id out of embedding range");
                double* row = x.row(b * T + t);
                const double* er = E.row(sym);
                for (int c = 0; c < d; ++c) row[c] = er[c];
            }
        }
    }
    if (mc.pos == PosEmbed::learnable) {
        const Matrix& pp = P.tensor("pos.P");
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t) {
                double* row = x.row(b * T + t);
                const double* pr = pp.row(t);
                for (int c = 0; c < d; ++c) row[c] += pr[c];
            }
    } else if (mc.pos == PosEmbed::sincos) {
        const Matrix pp = sincos_table(T, d);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t) {
                double* row = x.row(b * T + t);
                const double* pr = pp.row(t);
                for (int c = 0; c < d; ++c) row[c] += pr[c];
            }
    }

    if (fwd) fwd->attn.assign(static_cast<size_t>(mc.n_layers), {});
    rc.blocks.assign(static_cast<size_t>(mc.n_layers), BlockCache{});

    for (int l = 0; l < mc.n_layers; ++l) {
        BlockCache& bc = rc.blocks[static_cast<size_t>(l)];
        bc.x_in = x;
        bc.u = layer_norm(x, P.tensor(lname(l, "ln1.g")), P.tensor(lname(l, "ln1.b")), kLnEps);
        bc.q_all = matmul(bc.u, P.tensor(lname(l, "Wq")));
        bc.k_all = matmul(bc.u, P.tensor(lname(l, "Wk")));
        bc.v_all = matmul(bc.u, P.tensor(lname(l, "Wv")));

        const double bias_value =
            mc.bias.mode == BiasSpec::Mode::learnable ? P.tensor(lname(l, "attn.b")).at(0, 0)
                                                      : mc.bias.value;
        bc.Qk.resize(static_cast<size_t>(B) * H);
        bc.Kk.resize(static_cast<size_t>(B) * H);
        bc.Vk.resize(static_cast<size_t>(B) * H);
        bc.cat = Matrix(B * T, d);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const size_t i = static_cast<size_t>(b) * H + h;
                Matrix Q = slice(bc.q_all, b * T, (b + 1) * T, h * dh, (h + 1) * dh);
                Matrix K = slice(bc.k_all, b * T, (b + 1) * T, h * dh, (h + 1) * dh);
                if (mc.qk_norm) {
                    Q = qk_normalize(Q, qk_gain_segment(P.tensor(lname(l, "qk.gq")), h, dh),
                                     kQkEps);
                    K = qk_normalize(K, qk_gain_segment(P.tensor(lname(l, "qk.gk")), h, dh),
                                     kQkEps);
                }
                if (mc.pos == PosEmbed::rope) {
                    Q = apply_rope(Q);
                    K = apply_rope(K);
                }
                bc.Qk[i] = std::move(Q);
                bc.Kk[i] = std::move(K);
                bc.Vk[i] = slice(bc.v_all, b * T, (b + 1) * T, h * dh, (h + 1) * dh);

                const AttnConfig kc = kernel_cfg(mc, bias_value, h);
                Matrix O;
                if (mc.use_flash) {
                    O = flash_forward(bc.Qk[i], bc.Kk[i], bc.Vk[i], kc, BlockSpec{}).first;
                    if (fwd && want_attn)
                        fwd->attn[static_cast<size_t>(l)].push_back(
                            attn_forward(bc.Qk[i], bc.Kk[i], bc.Vk[i], kc).P);
                } else {
                    AttnResult r = attn_forward(bc.Qk[i], bc.Kk[i], bc.Vk[i], kc);
                    O = std::move(r.O);
                    if (fwd && want_attn)
                        fwd->attn[static_cast<size_t>(l)].push_back(std::move(r.P));
                }
                paste(bc.cat, O, b * T, h * dh);
            }
        }
        bc.ao = matmul(bc.cat, P.tensor(lname(l, "Wo")));

        Matrix att = mc.layerscale ? mul_bcast(bc.ao, P.tensor(lname(l, "gamma.attn"))) : bc.ao;
        bc.x_mid = x;
        add_inplace(bc.x_mid, att);

        bc.m = layer_norm(bc.x_mid, P.tensor(lname(l, "ln2.g")), P.tensor(lname(l, "ln2.b")),
                          kLnEps);
        bc.h1 = matmul(bc.m, P.tensor(lname(l, "mlp.W1")));
        const Matrix& b1 = P.tensor(lname(l, "mlp.b1"));
        for (int i = 0; i < bc.h1.rows; ++i) {
            double* row = bc.h1.row(i);
            for (int j = 0; j < bc.h1.cols; ++j) row[j] += b1.at(0, j);
        }
        bc.g1 = Matrix(bc.h1.rows, bc.h1.cols);
        for (size_t e = 0; e < bc.h1.data.size(); ++e) bc.g1.data[e] = gelu(bc.h1.data[e]);
        bc.mo = matmul(bc.g1, P.tensor(lname(l, "mlp.W2")));
        const Matrix& b2 = P.tensor(lname(l, "mlp.b2"));
        for (int i = 0; i < bc.mo.rows; ++i) {
            double* row = bc.mo.row(i);
            for (int j = 0; j < bc.mo.cols; ++j) row[j] += b2.at(0, j);
        }
        Matrix mlp = mc.layerscale ? mul_bcast(bc.mo, P.tensor(lname(l, "gamma.mlp"))) : bc.mo;
        x = bc.x_mid;
        add_inplace(x, mlp);
    }

    rc.x_final = x;
    rc.f = layer_norm(x, P.tensor("final.ln.g"), P.tensor("final.ln.b"), kLnEps);
    rc.pool = Matrix(B, d);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < T; ++t) {
            const double* fr = rc.f.row(b * T + t);
            double* pr = rc.pool.row(b);
            for (int c = 0; c < d; ++c) pr[c] += fr[c];
        }
        double* pr = rc.pool.row(b);
        for (int c = 0; c < d; ++c) pr[c] /= T;
    }
    const Matrix& hw = P.tensor("head.W");
    const double hb = P.tensor("head.b").at(0, 0);
    rc.predictions.resize(static_cast<size_t>(B));
    Matrix pred = matmul(rc.pool, hw);
    for (int b = 0; b < B; ++b) rc.predictions[static_cast<size_t>(b)] = pred.at(b, 0) + hb;

    // ---- loss and its derivative ----
    rc.dpred.assign(static_cast<size_t>(B), 0.0);
    double loss = 0.0;
    if (P.task.kind == TaskKind::ksum) {
        for (int b = 0; b < B; ++b) {
            const double e = rc.predictions[static_cast<size_t>(b)] - batch.targets[static_cast<size_t>(b)];
            loss += e * e;
            rc.dpred[static_cast<size_t>(b)] = 2.0 * e / B;
        }
        loss /= B;
    } else {
        for (int b = 0; b < B; ++b) {
            const double z = rc.predictions[static_cast<size_t>(b)];
            const double y = batch.targets[static_cast<size_t>(b)];
            loss += std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z)));
            rc.dpred[static_cast<size_t>(b)] = (logistic(z) - y) / B;
        }
        loss /= B;
    }
    rc.loss = loss;
    if (fwd) fwd->predictions = rc.predictions;
}

void backward_pass(const ModelParams& P, const TaskBatch& batch, const RunCache& rc,
                   std::vector<Matrix>& grads) {
    const ModelConfig& mc = P.model;
    const int B = batch.inputs.rows;
    const int T = P.task.tokens();
    const int d = mc.d_model;
    const int H = mc.n_heads;
    const int dh = d / H;

    const auto gidx = [&P](const std::string& name) {
        const int i = P.find(name);
        require(i >= 0, "model: missing tensor " + name);
        return static_cast<size_t>(i);
    };

    // ---- head and pooling ----
    Matrix dpool(B, d);
    {
        const Matrix& hw = P.tensor("head.W");
        Matrix dpred(B, 1);
        for (int b = 0; b < B; ++b) dpred.at(b, 0) = rc.dpred[static_cast<size_t>(b)];
        add_inplace(grads[gidx("head.W")], matmul(transpose(rc.pool), dpred));
        double db = 0.0;
        for (int b = 0; b < B; ++b) db += dpred.at(b, 0);
        grads[gidx("head.b")].at(0, 0) += db;
        dpool = matmul(dpred, transpose(hw));
    }
    Matrix df(B * T, d);
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            double* row = df.row(b * T + t);
            const double* pr = dpool.row(b);
            for (int c = 0; c < d; ++c) row[c] = pr[c] / T;
        }
    Matrix dx = layer_norm_backward(rc.x_final, P.tensor("final.ln.g"), kLnEps, df,
                                    &grads[gidx("final.ln.g")], &grads[gidx("final.ln.b")]);

    // ---- blocks in reverse ----
    for (int l = mc.n_layers - 1; l >= 0; --l) {
        const BlockCache& bc = rc.blocks[static_cast<size_t>(l)];

        // MLP sub-block: x = x_mid + gamma_m . mo
        Matrix dmo;
        if (mc.layerscale) {
            accum_rowsum_prod(grads[gidx(lname(l, "gamma.mlp"))], dx, bc.mo);
            dmo = mul_bcast(dx, P.tensor(lname(l, "gamma.mlp")));
        } else {
            dmo = dx;
        }
        add_inplace(grads[gidx(lname(l, "mlp.W2"))], matmul(transpose(bc.g1), dmo));
        accum_colsum(grads[gidx(lname(l, "mlp.b2"))], dmo);
        Matrix dg1 = matmul(dmo, transpose(P.tensor(lname(l, "mlp.W2"))));
        Matrix dh1(dg1.rows, dg1.cols);
        for (size_t e = 0; e < dg1.data.size(); ++e)
            dh1.data[e] = dg1.data[e] * gelu_grad(bc.h1.data[e]);
        add_inplace(grads[gidx(lname(l, "mlp.W1"))], matmul(transpose(bc.m), dh1));
        accum_colsum(grads[gidx(lname(l, "mlp.b1"))], dh1);
        Matrix dm = matmul(dh1, transpose(P.tensor(lname(l, "mlp.W1"))));
        Matrix dxmid = layer_norm_backward(bc.x_mid, P.tensor(lname(l, "ln2.g")), kLnEps, dm,
                                           &grads[gidx(lname(l, "ln2.g"))],
                                           &grads[gidx(lname(l, "ln2.b"))]);
        add_inplace(dxmid, dx);  // residual pass-through

        // attention sub-block: x_mid = x_in + gamma_a . ao
        Matrix dao;
        if (mc.layerscale) {
            accum_rowsum_prod(grads[gidx(lname(l, "gamma.attn"))], dxmid, bc.ao);
            dao = mul_bcast(dxmid, P.tensor(lname(l, "gamma.attn")));
        } else {
            dao = dxmid;
        }
        add_inplace(grads[gidx(lname(l, "Wo"))], matmul(transpose(bc.cat), dao));
        Matrix dcat = matmul(dao, transpose(P.tensor(lname(l, "Wo"))));

        const double bias_value =
            mc.bias.mode == BiasSpec::Mode::learnable ? P.tensor(lname(l, "attn.b")).at(0, 0)
                                                      : mc.bias.value;
        const bool want_dbias = mc.bias.mode == BiasSpec::Mode::learnable;
        double dbias = 0.0;
        Matrix dq_all(B * T, d), dk_all(B * T, d), dv_all(B * T, d);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const size_t i = static_cast<size_t>(b) * H + h;
                const Matrix dOh = slice(dcat, b * T, (b + 1) * T, h * dh, (h + 1) * dh);
                const AttnConfig kc = kernel_cfg(mc, bias_value, h);
                GradTriple gt;
                if (mc.use_flash) {
                    gt = flash_backward(bc.Qk[i], bc.Kk[i], bc.Vk[i], dOh, kc, BlockSpec{},
                                        nullptr, 1, want_dbias ? &dbias : nullptr)
                             .first;
                } else {
                    gt = attn_backward_ex(bc.Qk[i], bc.Kk[i], bc.Vk[i], dOh, kc,
                                          want_dbias ? &dbias : nullptr);
                }
                Matrix dQ = std::move(gt.dQ);
                Matrix dK = std::move(gt.dK);
                if (mc.pos == PosEmbed::rope) {
                    dQ = apply_rope_backward(dQ);
                    dK = apply_rope_backward(dK);
                }
                if (mc.qk_norm) {
                    const Matrix Qraw = slice(bc.q_all, b * T, (b + 1) * T, h * dh, (h + 1) * dh);
                    const Matrix Kraw = slice(bc.k_all, b * T, (b + 1) * T, h * dh, (h + 1) * dh);
                    std::vector<double> dgq(static_cast<size_t>(dh), 0.0);
                    std::vector<double> dgk(static_cast<size_t>(dh), 0.0);
                    dQ = qk_normalize_backward(
                        Qraw, qk_gain_segment(P.tensor(lname(l, "qk.gq")), h, dh), kQkEps, dQ,
                        &dgq);
                    dK = qk_normalize_backward(
                        Kraw, qk_gain_segment(P.tensor(lname(l, "qk.gk")), h, dh), kQkEps, dK,
                        &dgk);
                    Matrix& ggq = grads[gidx(lname(l, "qk.gq"))];
                    Matrix& ggk = grads[gidx(lname(l, "qk.gk"))];
                    for (int j = 0; j < dh; ++j) {
                        ggq.at(0, h * dh + j) += dgq[static_cast<size_t>(j)];
                        ggk.at(0, h * dh + j) += dgk[static_cast<size_t>(j)];
                    }
                }
                paste(dq_all, dQ, b * T, h * dh);
                paste(dk_all, dK, b * T, h * dh);
                paste(dv_all, gt.dV, b * T, h * dh);
            }
        }
        if (want_dbias) grads[gidx(lname(l, "attn.b"))].at(0, 0) += dbias;

        add_inplace(grads[gidx(lname(l, "Wq"))], matmul(transpose(bc.u), dq_all));
        add_inplace(grads[gidx(lname(l, "Wk"))], matmul(transpose(bc.u), dk_all));
        add_inplace(grads[gidx(lname(l, "Wv"))], matmul(transpose(bc.u), dv_all));
        Matrix du = matmul(dq_all, transpose(P.tensor(lname(l, "Wq"))));
        add_inplace(du, matmul(dk_all, transpose(P.tensor(lname(l, "Wk")))));
        add_inplace(du, matmul(dv_all, transpose(P.tensor(lname(l, "Wv")))));
        Matrix dxin = layer_norm_backward(bc.x_in, P.tensor(lname(l, "ln1.g")), kLnEps, du,
                                          &grads[gidx(lname(l, "ln1.g"))],
                                          &grads[gidx(lname(l, "ln1.b"))]);
        add_inplace(dxin, dxmid);  // residual pass-through
        dx = std::move(dxin);
    }

    // ---- embedding ----
    if (P.task.kind == TaskKind::ksum) {
        Matrix& dWe = grads[gidx("embed.W")];
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t) {
                const double s = batch.inputs.at(b, t);
                const double* row = dx.row(b * T + t);
                for (int c = 0; c < d; ++c) dWe.at(0, c) += s * row[c];
            }
    } else {
        Matrix& dE = grads[gidx("embed.W")];
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t) {
                const int sym = static_cast<int>(batch.inputs.at(b, t));
                const double* row = dx.row(b * T + t);
                double* er = dE.row(sym);
                for (int c = 0; c < d; ++c) er[c] += row[c];
            }
    }
    if (mc.pos == PosEmbed::learnable) {
        Matrix& dP = grads[gidx("pos.P")];
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t) {
                const double* row = dx.row(b * T + t);
                double* pr = dP.row(t);
                for (int c = 0; c < d; ++c) pr[c] += row[c];
            }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

void TaskSpec::validate() const {
    if (kind == TaskKind::ksum) {
        require(ksum_n >= 1, "TaskSpec: ksum_n must be >= 1");
        require(ksum_k >= 0 && ksum_k <= ksum_n, "TaskSpec: need 0 <= k <= n");
    } else {
        require(vocab >= 2, "TaskSpec: vocab must be >= 2");
        require(len_lo >= 4 && len_lo <= len_hi && len_hi <= max_len,
                "TaskSpec: need 4 <= len_lo <= len_hi <= max_len");
    }
}

void ModelConfig::validate() const {
    require(d_model >= 1 && n_heads >= 1 && d_model % n_heads == 0,
            "ModelConfig: d_model must be a positive multiple of n_heads");
    require(n_layers >= 1 && mlp_ratio >= 1, "ModelConfig: n_layers and mlp_ratio must be >= 1");
    require(std::isfinite(layerscale_init), "ModelConfig: layerscale_init must be finite");
    if (pos == PosEmbed::rope)
        require((d_model / n_heads) % 2 == 0, "ModelConfig: rope needs an even head dimension");
    if (use_flash)
        require(activation == Activation::sigmoid && alpha == 0.0,
                "ModelConfig: the tiled kernel path supports sigmoid attention with alpha=0");
    kernel_cfg(*this, bias.value, 0).validate();
}

void TrainConfig::validate() const {
    require(steps >= 1 && batch >= 1, "TrainConfig: steps and batch must be >= 1");
    require(std::isfinite(lr) && lr >= 0.0, "TrainConfig: lr must be finite and >= 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
            "TrainConfig: betas must lie in [0, 1)");
    require(adam_eps > 0.0, "TrainConfig: adam_eps must be > 0");
    require(clip >= 0.0, "TrainConfig: clip must be >= 0");
    require(metrics_every >= 1 && smooth_window >= 1,
            "TrainConfig: metrics_every and smooth_window must be >= 1");
}

// ---------------------------------------------------------------------------
// Task generators
// ---------------------------------------------------------------------------

TaskBatch gen_ksum(int n, int k, int batch, Rng& rng) {
    require(n >= 1, "gen_ksum: n must be >= 1");
    require(k >= 0 && k <= n, "gen_ksum: need 0 <= k <= n");
    require(batch >= 1, "gen_ksum: batch must be >= 1");
    TaskBatch tb;
    tb.kind = TaskKind::ksum;
    tb.inputs = Matrix(batch, 2 * n);
    tb.targets.resize(static_cast<size_t>(batch));
    std::vector<int> idx(static_cast<size_t>(n));
    for (int b = 0; b < batch; ++b) {
        for (int i = 0; i < n; ++i) tb.inputs.at(b, i) = rng.normal();
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        for (int j = 0; j < k; ++j) {
            const int pick = j + static_cast<int>(rng.next_u64() % static_cast<uint64_t>(n - j));
            std::swap(idx[static_cast<size_t>(j)], idx[static_cast<size_t>(pick)]);
            tb.inputs.at(b, n + idx[static_cast<size_t>(j)]) = 1.0;
        }
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += tb.inputs.at(b, n + i) * tb.inputs.at(b, i);
        tb.targets[static_cast<size_t>(b)] = s;
    }
    return tb;
}

int pair_repeat_label(const std::vector<int>& s) {
    const int L = static_cast<int>(s.size());
    for (int n = 2; n + 1 < L; ++n)
        if (s[static_cast<size_t>(n)] == s[0] && s[static_cast<size_t>(n) + 1] == s[1]) return 1;
    return 0;
}

TaskBatch gen_pair_repeat(int vocab, int len_lo, int len_hi, int max_len, int batch, Rng& rng) {
    require(vocab >= 2, "gen_pair_repeat: vocab must be >= 2");
    require(len_lo >= 4 && len_lo <= len_hi && len_hi <= max_len,
            "gen_pair_repeat: need 4 <= len_lo <= len_hi <= max_len");
    require(batch >= 1, "gen_pair_repeat: batch must be >= 1");
    TaskBatch tb;
    tb.kind = TaskKind::pair_repeat;
    tb.inputs = Matrix(batch, max_len);
    tb.targets.resize(static_cast<size_t>(batch));
    tb.lengths.resize(static_cast<size_t>(batch));
    std::vector<int> s;
    for (int b = 0; b < batch; ++b) {
        const int L =
            len_lo + static_cast<int>(rng.next_u64() % static_cast<uint64_t>(len_hi - len_lo + 1));
        const int want = b % 2;  // balanced labels by construction
        s.assign(static_cast<size_t>(L), 0);
        if (want == 1) {
            for (int i = 0; i < L; ++i)
                s[static_cast<size_t>(i)] = static_cast<int>(rng.next_u64() % vocab);
            // plant the repeat at a uniform position n in [2, L-2]
            const int pos = 2 + static_cast<int>(rng.next_u64() % static_cast<uint64_t>(L - 3));
            s[static_cast<size_t>(pos)] = s[0];
            s[static_cast<size_t>(pos) + 1] = s[1];
        } else {
            bool ok = false;
            for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
                for (int i = 0; i < L; ++i)
                    s[static_cast<size_t>(i)] = static_cast<int>(rng.next_u64() % vocab);
                ok = pair_repeat_label(s) == 0;
            }
            if (!ok)
                throw std::runtime_error(
                    "gen_pair_repeat: could not sample a negative example; vocabulary too small "
                    "for the requested lengths");
        }
        for (int t = 0; t < max_len; ++t)
            tb.inputs.at(b, t) = t < L ? static_cast<double>(s[static_cast<size_t>(t)])
                                       : static_cast<double>(vocab);
        tb.lengths[static_cast<size_t>(b)] = L;
        tb.targets[static_cast<size_t>(b)] = static_cast<double>(pair_repeat_label(s));
    }
    return tb;
}

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

int ModelParams::find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    return -1;
}

Matrix& ModelParams::tensor(const std::string& name) {
    const int i = find(name);
    require(i >= 0, "ModelParams: unknown tensor " + name);
    return tensors[static_cast<size_t>(i)];
}

const Matrix& ModelParams::tensor(const std::string& name) const {
    const int i = find(name);
    require(i >= 0, "ModelParams: unknown tensor " + name);
    return tensors[static_cast<size_t>(i)];
}

long long ModelParams::scalar_count() const {
    long long n = 0;
    for (const Matrix& t : tensors) n += static_cast<long long>(t.data.size());
    return n;
}

ModelParams init_model(const ModelConfig& model, const TaskSpec& task, Rng& rng) {
    model.validate();
    task.validate();
    ModelParams p;
    p.model = model;
    p.task = task;
    const int d = model.d_model;
    const int T = task.tokens();

    const auto put = [&p](const std::string& name, Matrix m) {
        p.names.push_back(name);
        p.tensors.push_back(std::move(m));
    };
    const auto trunc = [&rng](int r, int c) { return rng_normal(rng, r, c, 0.0, 0.02, 2.0); };
    const auto filled = [](int r, int c, double v) {
        Matrix m(r, c);
        for (double& e : m.data) e = v;
        return m;
    };

    if (task.kind == TaskKind::ksum)
        put("embed.W", trunc(1, d));
    else
        put("embed.W", trunc(task.vocab + 1, d));
    if (model.pos == PosEmbed::learnable) put("pos.P", trunc(T, d));

    for (int l = 0; l < model.n_layers; ++l) {
        put(lname(l, "ln1.g"), filled(1, d, 1.0));
        put(lname(l, "ln1.b"), Matrix(1, d));
        put(lname(l, "Wq"), trunc(d, d));
        put(lname(l, "Wk"), trunc(d, d));
        put(lname(l, "Wv"), trunc(d, d));
        put(lname(l, "Wo"), trunc(d, d));
        if (model.qk_norm) {
            put(lname(l, "qk.gq"), filled(1, d, 1.0));
            put(lname(l, "qk.gk"), filled(1, d, 1.0));
        }
        if (model.bias.mode == BiasSpec::Mode::learnable)
            put(lname(l, "attn.b"), filled(1, 1, model.bias.value));
        if (model.layerscale) put(lname(l, "gamma.attn"), filled(1, d, model.layerscale_init));
        put(lname(l, "ln2.g"), filled(1, d, 1.0));
        put(lname(l, "ln2.b"), Matrix(1, d));
        put(lname(l, "mlp.W1"), trunc(d, model.mlp_ratio * d));
        put(lname(l, "mlp.b1"), Matrix(1, model.mlp_ratio * d));
        put(lname(l, "mlp.W2"), trunc(model.mlp_ratio * d, d));
        put(lname(l, "mlp.b2"), Matrix(1, d));
        if (model.layerscale) put(lname(l, "gamma.mlp"), filled(1, d, model.layerscale_init));
    }

    put("final.ln.g", filled(1, d, 1.0));
    put("final.ln.b", Matrix(1, d));
    put("head.W", trunc(d, 1));
    put("head.b", Matrix(1, 1));
    return p;
}

std::vector<Matrix> zero_grads(const ModelParams& params) {
    std::vector<Matrix> g;
    g.reserve(params.tensors.size());
    for (const Matrix& t : params.tensors) g.emplace_back(t.rows, t.cols);
    return g;
}

// ---------------------------------------------------------------------------
// Model entry points
// ---------------------------------------------------------------------------

ForwardResult model_forward(const ModelParams& params, const TaskBatch& batch, bool want_attn) {
    check_batch(params, batch);
    RunCache rc;
    ForwardResult fwd;
    forward_pass(params, batch, want_attn, rc, &fwd);
    return fwd;
}

double model_loss(const ModelParams& params, const TaskBatch& batch) {
    check_batch(params, batch);
    RunCache rc;
    forward_pass(params, batch, false, rc, nullptr);
    return rc.loss;
}

double model_backward(const ModelParams& params, const TaskBatch& batch,
                      std::vector<Matrix>& grads, ForwardResult* fwd, bool want_attn) {
    check_batch(params, batch);
    require(grads.size() == params.tensors.size(),
            "model_backward: grads must be shaped like the parameter registry");
    for (size_t i = 0; i < grads.size(); ++i)
        require(grads[i].same_shape(params.tensors[i]),
                "model_backward: grads must be shaped like the parameter registry");
    RunCache rc;
    forward_pass(params, batch, want_attn, rc, fwd);
    backward_pass(params, batch, rc, grads);
    return rc.loss;
}

double batch_accuracy(const std::vector<double>& logits, const std::vector<double>& labels) {
    require(!logits.empty() && logits.size() == labels.size(),
            "batch_accuracy: need matching non-empty vectors");
    long long hit = 0;
    for (size_t i = 0; i < logits.size(); ++i)
        if ((logits[i] > 0.0) == (labels[i] > 0.5)) ++hit;
    return static_cast<double>(hit) / static_cast<double>(logits.size());
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * std::exp(-0.5 * x * x) * kInvSqrt2Pi;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

AdamState make_adam_state(const ModelParams& params) {
    AdamState st;
    st.m = zero_grads(params);
    st.v = zero_grads(params);
    st.t = 0;
    return st;
}

void adam_step(ModelParams& params, const std::vector<Matrix>& grads, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
    require(grads.size() == params.tensors.size() && state.m.size() == params.tensors.size() &&
                state.v.size() == params.tensors.size(),
            "adam_step: registry size mismatch");
    ++state.t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < grads.size(); ++i) {
        Matrix& p = params.tensors[i];
        Matrix& m = state.m[i];
        Matrix& v = state.v[i];
        const Matrix& g = grads[i];
        for (size_t e = 0; e < p.data.size(); ++e) {
            m.data[e] = beta1 * m.data[e] + (1.0 - beta1) * g.data[e];
            v.data[e] = beta2 * v.data[e] + (1.0 - beta2) * g.data[e] * g.data[e];
            const double mh = m.data[e] / bc1;
            const double vh = v.data[e] / bc2;
            p.data[e] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

double schedule_lr(Schedule schedule, double max_lr, long long step, long long total_steps) {
    require(total_steps >= 1 && step >= 0 && step < total_steps,
            "schedule_lr: need 0 <= step < total_steps");
    if (schedule == Schedule::constant) return max_lr;
    const long long warm = std::max<long long>(1, (total_steps * 5 + 99) / 100);  // ceil(5%)
    if (step < warm) return max_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    if (total_steps <= warm) return max_lr;
    const double prog =
        static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
    return max_lr * 0.5 * (1.0 + std::cos(kPi * std::min(1.0, prog)));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

double window_mean(const std::deque<double>& w) {
    double s = 0.0;
    for (double v : w) s += v;
    return w.empty() ? 0.0 : s / static_cast<double>(w.size());
}

MetricsRecord make_record(long long step, double loss, double acc, bool track_acc,
                          const ForwardResult& fwd, double grad_norm, double lr, int n_layers) {
    MetricsRecord rec;
    rec.step = step;
    rec.loss = loss;
    if (track_acc) rec.accuracy = acc;
    rec.grad_norm = grad_norm;
    rec.lr = lr;
    rec.attn_norms.assign(static_cast<size_t>(n_layers), 0.0);
    rec.hoyer.assign(static_cast<size_t>(n_layers), 0.0);
    for (int l = 0; l < n_layers; ++l) {
        const std::vector<Matrix>& ps = fwd.attn[static_cast<size_t>(l)];
        double norm_sum = 0.0, hoyer_sum = 0.0;
        long long hoyer_rows = 0;
        for (const Matrix& p : ps) {
            norm_sum += frobenius_norm(p);
            std::vector<double> row(static_cast<size_t>(p.cols));
            for (int i = 0; i < p.rows; ++i) {
                double ssq = 0.0;
                for (int j = 0; j < p.cols; ++j) {
                    row[static_cast<size_t>(j)] = std::abs(p.at(i, j));
                    ssq += row[static_cast<size_t>(j)];
                }
                if (ssq == 0.0 || p.cols < 2) continue;  // sparsity undefined on empty rows
                hoyer_sum += hoyer_sparsity(row);
                ++hoyer_rows;
            }
        }
        if (!ps.empty()) rec.attn_norms[static_cast<size_t>(l)] = norm_sum / static_cast<double>(ps.size());
        if (hoyer_rows > 0) rec.hoyer[static_cast<size_t>(l)] = hoyer_sum / static_cast<double>(hoyer_rows);
    }
    return rec;
}

}  // namespace

TrainResult train(const ModelConfig& model, const TaskSpec& task, const TrainConfig& cfg) {
    model.validate();
    task.validate();
    cfg.validate();

    Rng init_rng(cfg.seed);
    Rng data_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    TrainResult out;
    out.params = init_model(model, task, init_rng);
    AdamState state = make_adam_state(out.params);
    std::vector<Matrix> grads = zero_grads(out.params);
    const bool track_acc = task.kind == TaskKind::pair_repeat;

    std::deque<double> loss_win, acc_win;
    bool stop_now = false;
    for (long long step = 0; step < cfg.steps; ++step) {
        // the stop decision uses completed steps only, so the stopping step can
        // still be recorded with its attention metrics
        if (static_cast<int>(loss_win.size()) == cfg.smooth_window) {
            if (cfg.stop_loss >= 0.0 && window_mean(loss_win) < cfg.stop_loss) stop_now = true;
            if (track_acc && cfg.stop_acc >= 0.0 && window_mean(acc_win) > cfg.stop_acc)
                stop_now = true;
        }
        const bool record = stop_now || step % cfg.metrics_every == 0 || step == cfg.steps - 1;

        const double lr = schedule_lr(cfg.schedule, cfg.lr, step, cfg.steps);
        TaskBatch batch = task.kind == TaskKind::ksum
                              ? gen_ksum(task.ksum_n, task.ksum_k, cfg.batch, data_rng)
                              : gen_pair_repeat(task.vocab, task.len_lo, task.len_hi,
                                                task.max_len, cfg.batch, data_rng);
        for (Matrix& g : grads) std::fill(g.data.begin(), g.data.end(), 0.0);

        ForwardResult fwd;
        double loss = 0.0;
        try {
            loss = model_backward(out.params, batch, grads, &fwd, record);
        } catch (const std::domain_error& e) {
            throw std::runtime_error("train: diverged at step " + std::to_string(step) + ": " +
                                     e.what());
        }
        if (!std::isfinite(loss))
            throw std::runtime_error("train: diverged at step " + std::to_string(step) +
                                     ": non-finite loss");
        double gsq = 0.0;
        for (const Matrix& g : grads)
            for (double v : g.data) gsq += v * v;
        const double grad_norm = std::sqrt(gsq);
        if (!std::isfinite(grad_norm))
            throw std::runtime_error("train: diverged at step " + std::to_string(step) +
                                     ": non-finite gradient");

        const double acc = track_acc ? batch_accuracy(fwd.predictions, batch.targets) : -1.0;
        loss_win.push_back(loss);
        if (static_cast<int>(loss_win.size()) > cfg.smooth_window) loss_win.pop_front();
        if (track_acc) {
            acc_win.push_back(acc);
            if (static_cast<int>(acc_win.size()) > cfg.smooth_window) acc_win.pop_front();
        }

        if (record)
            out.metrics.push_back(make_record(step, loss, acc, track_acc, fwd, grad_norm, lr,
                                              model.n_layers));
        out.steps_run = step + 1;
        out.samples_seen += cfg.batch;
        if (stop_now) break;

        if (cfg.clip > 0.0 && grad_norm > cfg.clip) {
            const double scale = cfg.clip / grad_norm;
            for (Matrix& g : grads)
                for (double& v : g.data) v *= scale;
        }
        adam_step(out.params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    }

    out.final_loss = window_mean(loss_win);
    out.final_accuracy = track_acc ? window_mean(acc_win) : -1.0;
    return out;
}

std::vector<LengthReport> eval_length_generalization(const ModelParams& params,
                                                     const std::vector<int>& lengths,
                                                     int samples_per_length, Rng& rng) {
    require(params.task.kind == TaskKind::pair_repeat,
            "eval_length_generalization: defined for the pair_repeat task");
    if (samples_per_length <= 0) return {};
    std::vector<LengthReport> out;
    for (int L : lengths) {
        require(L >= 4 && L <= params.task.max_len,
                "eval_length_generalization: lengths must lie in [4, max_len]");
        long long hit = 0, seen = 0;
        while (seen < samples_per_length) {
            const int take = static_cast<int>(
                std::min<long long>(256, samples_per_length - seen));
            TaskBatch batch =
                gen_pair_repeat(params.task.vocab, L, L, params.task.max_len, take, rng);
            const ForwardResult fwd = model_forward(params, batch);
            for (size_t i = 0; i < fwd.predictions.size(); ++i)
                if ((fwd.predictions[i] > 0.0) == (batch.targets[i] > 0.5)) ++hit;
            seen += take;
        }
        out.push_back({L, static_cast<double>(hit) / static_cast<double>(seen), seen});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records,
                       int n_layers, bool with_accuracy) {
    require(n_layers >= 1, "write_metrics_csv: n_layers must be >= 1");
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    std::string header = "step,loss";
    if (with_accuracy) header += ",accuracy";
    for (int l = 0; l < n_layers; ++l) header += ",attn_norm_layer_" + std::to_string(l);
    for (int l = 0; l < n_layers; ++l) header += ",hoyer_layer_" + std::to_string(l);
    header += ",grad_norm,lr\n";
    std::fputs(header.c_str(), f);
    for (const MetricsRecord& r : records) {
        if (static_cast<int>(r.attn_norms.size()) != n_layers ||
            static_cast<int>(r.hoyer.size()) != n_layers) {
            std::fclose(f);
            throw std::invalid_argument("write_metrics_csv: record layer count mismatch");
        }
        std::string line = std::to_string(r.step) + "," + fmt_double(r.loss);
        if (with_accuracy) line += "," + fmt_double(r.accuracy.value_or(-1.0));
        for (double v : r.attn_norms) line += "," + fmt_double(v);
        for (double v : r.hoyer) line += "," + fmt_double(v);
        line += "," + fmt_double(r.grad_norm) + "," + fmt_double(r.lr) + "\n";
        std::fputs(line.c_str(), f);
    }
    std::fclose(f);
}

void save_params(const ModelParams& params, const std::string& bin_path,
                 const std::string& manifest_path) {
    std::FILE* f = std::fopen(bin_path.c_str(), "wb");
    if (!f) throw std::runtime_error("save_params: cannot open " + bin_path);
    for (const Matrix& t : params.tensors) {
        if (!t.data.empty() &&
            std::fwrite(t.data.data(), sizeof(double), t.data.size(), f) != t.data.size()) {
            std::fclose(f);
            throw std::runtime_error("save_params: short write to " + bin_path);
        }
    }
    std::fclose(f);

    std::FILE* m = std::fopen(manifest_path.c_str(), "w");
    if (!m) throw std::runtime_error("save_params: cannot open " + manifest_path);
    std::fprintf(m, "{\n  \"schema\": 1,\n  \"scalars\": %lld,\n  \"tensors\": [\n",
                 params.scalar_count());
    for (size_t i = 0; i < params.tensors.size(); ++i)
        std::fprintf(m, "    {\"name\": \"%s\", \"rows\": %d, \"cols\": %d}%s\n",
                     params.names[i].c_str(), params.tensors[i].rows, params.tensors[i].cols,
                     i + 1 < params.tensors.size() ? "," : "");
    std::fprintf(m, "  ]\n}\n");
    std::fclose(m);
}

void load_params(ModelParams& params, const std::string& bin_path) {
    std::FILE* f = std::fopen(bin_path.c_str(), "rb");
    if (!f) throw std::runtime_error("load_params: cannot open " + bin_path);
    for (Matrix& t : params.tensors) {
        if (!t.data.empty() &&
            std::fread(t.data.data(), sizeof(double), t.data.size(), f) != t.data.size()) {
            std::fclose(f);
            throw std::runtime_error("load_params: file shorter than the parameter registry");
        }
    }
    // exactly at end-of-file?
    char extra = 0;
    const size_t more = std::fread(&extra, 1, 1, f);
    std::fclose(f);
    if (more != 0)
        throw std::runtime_error("load_params: file larger than the parameter registry");
    for (const Matrix& t : params.tensors) t.ensure_finite("load_params");
}

}  // namespace sigattn
