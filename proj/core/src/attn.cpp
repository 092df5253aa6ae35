#include "sigattn/attn.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace sigattn {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// Visible keys for query row i.
int visible_keys(bool causal, int i, int n_keys) { return causal ? i + 1 : n_keys; }

struct ForwardPieces {
    Matrix S;       // biased logits
    Matrix P_act;   // activation output with masked entries zeroed, before row weights
    Matrix P;       // P_act with the alpha row multiplier applied
    Matrix Qn, Kn;  // queries/keys after optional unit-gain normalization
    double scale = 0.0;
};

ForwardPieces forward_pieces(const Matrix& Q, const Matrix& K, const Matrix& V,
                             const AttnConfig& cfg) {
    cfg.validate();
    require(Q.cols == K.cols, "attn: Q and K feature dimensions disagree");
    require(Q.cols >= 1, "attn: feature dimension must be >= 1");
    require(K.rows == V.rows, "attn: K and V row counts disagree");
    require(K.rows >= 1, "attn: empty key set");
    if (cfg.causal) require(Q.rows == K.rows, "attn: causal attention requires square shapes");

    ForwardPieces fp;
    const int n_q = Q.rows, n_k = K.rows, d = Q.cols;
    if (cfg.qk_norm) {
        std::vector<double> unit(d, 1.0);
        fp.Qn = qk_normalize(Q, unit, cfg.qk_norm_eps);
        fp.Kn = qk_normalize(K, unit, cfg.qk_norm_eps);
    } else {
        fp.Qn = Q;
        fp.Kn = K;
    }
    fp.scale = resolve_scale(cfg, d);

    const bool use_alibi = cfg.pos_bias.kind == PosBias::Kind::alibi;
    const double slope = use_alibi ? alibi_slope(cfg.pos_bias.head, cfg.pos_bias.num_heads) : 0.0;

    fp.S = matmul(fp.Qn, transpose(fp.Kn));
    for (int i = 0; i < n_q; ++i) {
        const double bi = row_bias_value(cfg, i, n_k);
        for (int j = 0; j < n_k; ++j) {
            double v = fp.S.at(i, j) * fp.scale;
            if (use_alibi) v += alibi_entry(i, j, slope, cfg.causal);
            v += bi;
            fp.S.at(i, j) = v;
        }
    }
    fp.S.ensure_finite("attn logits");

    if (cfg.activation == Activation::softmax) {
        if (cfg.causal) {
            Matrix mask(n_q, n_k);
            for (int i = 0; i < n_q; ++i)
                for (int j = 0; j <= i; ++j) mask.at(i, j) = 1.0;
            fp.P_act = row_softmax(fp.S, &mask);
        } else {
            fp.P_act = row_softmax(fp.S);
        }
    } else {
        fp.P_act = Matrix(n_q, n_k);
        for (int i = 0; i < n_q; ++i) {
            const int jmax = cfg.causal ? i : n_k - 1;
            for (int j = 0; j <= jmax; ++j) {
                const double s = fp.S.at(i, j);
                double p = 0.0;
                switch (cfg.activation) {
                    case Activation::sigmoid:
                        p = sigmoid_via_tanh(s);
                        break;
                    case Activation::relu:
                        p = s > 0.0 ? s : 0.0;
                        break;
                    case Activation::tanh:
                        p = std::tanh(s);
                        break;
                    default:
                        break;
                }
                fp.P_act.at(i, j) = p;
            }
        }
    }

    if (cfg.alpha > 0.0) {
        fp.P = fp.P_act;
        for (int i = 0; i < n_q; ++i) {
            const double w = std::pow(1.0 / visible_keys(cfg.causal, i, n_k), cfg.alpha);
            for (int j = 0; j < n_k; ++j) fp.P.at(i, j) *= w;
        }
        fp.P.ensure_finite("attn row normalization");
    } else {
        fp.P = fp.P_act;
    }
    return fp;
}

}  // namespace

void AttnConfig::validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha))
        throw std::invalid_argument("AttnConfig: alpha must be finite and >= 0");
    if (bias.mode != BiasSpec::Mode::none && activation != Activation::sigmoid)
        throw std::invalid_argument("AttnConfig: bias modes other than none require sigmoid");
    if (qk_norm && !(qk_norm_eps > 0.0))
        throw std::invalid_argument("AttnConfig: qk_norm_eps must be > 0");
    if (pos_bias.kind == PosBias::Kind::alibi) {
        if (pos_bias.num_heads < 1 || pos_bias.head < 0 || pos_bias.head >= pos_bias.num_heads)
            throw std::invalid_argument("AttnConfig: alibi head index out of range");
    }
    if (scale && !std::isfinite(*scale))
        throw std::invalid_argument("AttnConfig: scale must be finite");
}

double resolve_scale(const AttnConfig& cfg, int d_qk) {
    require(d_qk >= 1, "resolve_scale: d_qk must be >= 1");
    return cfg.scale ? *cfg.scale : 1.0 / std::sqrt(static_cast<double>(d_qk));
}

double alibi_slope(int head, int num_heads) {
    require(num_heads >= 1, "alibi_slope: num_heads must be >= 1");
    require(head >= 0 && head < num_heads, "alibi_slope: head out of range");
    return std::exp2(-8.0 * (head + 1) / static_cast<double>(num_heads));
}

double alibi_entry(int i, int j, double slope, bool causal) {
    if (causal) {
        if (j > i) return 0.0;
        return -slope * static_cast<double>(i - j);
    }
    if (j >= i) return -slope * static_cast<double>(j - i);
    return -(slope * kAlibiBackwardSlopeRatio) * static_cast<double>(i - j);
}

double row_bias_value(const AttnConfig& cfg, int i, int n_keys) {
    switch (cfg.bias.mode) {
        case BiasSpec::Mode::none:
            return 0.0;
        case BiasSpec::Mode::constant:
        case BiasSpec::Mode::learnable:
            return cfg.bias.value;
        case BiasSpec::Mode::neg_log_n:
            return -std::log(static_cast<double>(n_keys));
        case BiasSpec::Mode::neg_log_rowlen:
            return -std::log(static_cast<double>(visible_keys(cfg.causal, i, n_keys)));
    }
    return 0.0;
}

std::vector<double> logit_bias(const AttnConfig& cfg, int n, const std::vector<int>& row_lengths) {
    require(n >= 1, "logit_bias: n must be >= 1");
    std::vector<double> out(static_cast<size_t>(n), 0.0);
    switch (cfg.bias.mode) {
        case BiasSpec::Mode::none:
            break;
        case BiasSpec::Mode::constant:
        case BiasSpec::Mode::learnable:
            std::fill(out.begin(), out.end(), cfg.bias.value);
            break;
        case BiasSpec::Mode::neg_log_n:
            std::fill(out.begin(), out.end(), -std::log(static_cast<double>(n)));
            break;
        case BiasSpec::Mode::neg_log_rowlen: {
            require(row_lengths.size() == static_cast<size_t>(n),
                    "logit_bias: neg_log_rowlen needs one row length per row");
            for (int i = 0; i < n; ++i) {
                require(row_lengths[i] >= 1, "logit_bias: row lengths must be >= 1");
                out[i] = -std::log(static_cast<double>(row_lengths[i]));
            }
            break;
        }
    }
    return out;
}

Matrix alibi_bias(int n, int head, int num_heads, bool causal) {
    require(n >= 1, "alibi_bias: n must be >= 1");
    const double slope = alibi_slope(head, num_heads);
    Matrix b(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) b.at(i, j) = alibi_entry(i, j, slope, causal);
    return b;
}

Matrix seq_norm_weights(int n, double alpha, bool causal) {
    require(n >= 1, "seq_norm_weights: n must be >= 1");
    require(alpha >= 0.0, "seq_norm_weights: alpha must be >= 0");
    Matrix w(n, n);
    for (int i = 0; i < n; ++i) {
        const double wi = std::pow(1.0 / visible_keys(causal, i, n), alpha);
        for (int j = 0; j < n; ++j) w.at(i, j) = wi;
    }
    return w;
}

AttnResult attn_forward(const Matrix& Q, const Matrix& K, const Matrix& V, const AttnConfig& cfg) {
    ForwardPieces fp = forward_pieces(Q, K, V, cfg);
    AttnResult res;
    res.O = matmul(fp.P, V);
    res.P = std::move(fp.P);
    res.S = std::move(fp.S);
    return res;
}

GradTriple attn_backward(const Matrix& Q, const Matrix& K, const Matrix& V, const Matrix& dO,
                         const AttnConfig& cfg) {
    return attn_backward_ex(Q, K, V, dO, cfg, nullptr);
}

GradTriple attn_backward_ex(const Matrix& Q, const Matrix& K, const Matrix& V, const Matrix& dO,
                            const AttnConfig& cfg, double* d_bias) {
    require(dO.rows == Q.rows && dO.cols == V.cols, "attn_backward: dO shape mismatch");
    ForwardPieces fp = forward_pieces(Q, K, V, cfg);
    const int n_q = Q.rows, n_k = K.rows;

    GradTriple g;
    g.dV = matmul(transpose(fp.P), dO);

    Matrix dP = matmul(dO, transpose(V));  // gradient w.r.t. the final attention matrix
    if (cfg.alpha > 0.0) {                 // fold the row multiplier: dP_act = w_i * dP
        for (int i = 0; i < n_q; ++i) {
            const double w = std::pow(1.0 / visible_keys(cfg.causal, i, n_k), cfg.alpha);
            for (int j = 0; j < n_k; ++j) dP.at(i, j) *= w;
        }
    }

    Matrix dS(n_q, n_k);
    switch (cfg.activation) {
        case Activation::softmax:
            for (int i = 0; i < n_q; ++i) {
                double r = 0.0;
                for (int j = 0; j < n_k; ++j) r += dP.at(i, j) * fp.P_act.at(i, j);
                for (int j = 0; j < n_k; ++j)
                    dS.at(i, j) = fp.P_act.at(i, j) * (dP.at(i, j) - r);
            }
            break;
        case Activation::sigmoid:
            for (int i = 0; i < n_q; ++i) {
                const int jmax = cfg.causal ? i : n_k - 1;
                for (int j = 0; j <= jmax; ++j) {
                    const double p = fp.P_act.at(i, j);
                    dS.at(i, j) = p * (1.0 - p) * dP.at(i, j);
                }
            }
            break;
        case Activation::relu:
            for (int i = 0; i < n_q; ++i) {
                const int jmax = cfg.causal ? i : n_k - 1;
                for (int j = 0; j <= jmax; ++j)
                    dS.at(i, j) = fp.S.at(i, j) > 0.0 ? dP.at(i, j) : 0.0;  // relu'(0) := 0
            }
            break;
        case Activation::tanh:
            for (int i = 0; i < n_q; ++i) {
                const int jmax = cfg.causal ? i : n_k - 1;
                for (int j = 0; j <= jmax; ++j) {
                    const double t = fp.P_act.at(i, j);
                    dS.at(i, j) = (1.0 - t * t) * dP.at(i, j);
                }
            }
            break;
    }

    if (d_bias) {
        double acc = 0.0;
        for (double v : dS.data) acc += v;
        *d_bias += acc;
    }

    // Same scale factor as the forward logits.
    Matrix dQn = scaled(matmul(dS, fp.Kn), fp.scale);
    Matrix dKn = scaled(matmul(transpose(dS), fp.Qn), fp.scale);
    if (cfg.qk_norm) {
        std::vector<double> unit(static_cast<size_t>(Q.cols), 1.0);
        g.dQ = qk_normalize_backward(Q, unit, cfg.qk_norm_eps, dQn);
        g.dK = qk_normalize_backward(K, unit, cfg.qk_norm_eps, dKn);
    } else {
        g.dQ = std::move(dQn);
        g.dK = std::move(dKn);
    }
    g.dQ.ensure_finite("attn_backward dQ");
    g.dK.ensure_finite("attn_backward dK");
    g.dV.ensure_finite("attn_backward dV");
    return g;
}

Matrix qk_normalize(const Matrix& m, const std::vector<double>& gain, double eps) {
    require(gain.size() == static_cast<size_t>(m.cols), "qk_normalize: gain length mismatch");
    require(eps >= 0.0, "qk_normalize: eps must be >= 0");
    const int d = m.cols;
    Matrix out(m.rows, d);
    for (int i = 0; i < m.rows; ++i) {
        const double* x = m.row(i);
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += x[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) out.at(i, j) = (x[j] - mu) * inv * gain[j];
    }
    out.ensure_finite("qk_normalize");
    return out;
}

Matrix qk_normalize_backward(const Matrix& m, const std::vector<double>& gain, double eps,
                             const Matrix& dY, std::vector<double>* d_gain) {
    require(gain.size() == static_cast<size_t>(m.cols), "qk_normalize_backward: gain length mismatch");
    require(dY.same_shape(m), "qk_normalize_backward: dY shape mismatch");
    const int d = m.cols;
    Matrix dX(m.rows, d);
    std::vector<double> xhat(static_cast<size_t>(d));
    for (int i = 0; i < m.rows; ++i) {
        const double* x = m.row(i);
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += x[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        double c1 = 0.0, c2 = 0.0;
        for (int j = 0; j < d; ++j) {
            xhat[j] = (x[j] - mu) * inv;
            const double dxh = dY.at(i, j) * gain[j];
            c1 += dxh;
            c2 += dxh * xhat[j];
            if (d_gain) (*d_gain)[j] += dY.at(i, j) * xhat[j];
        }
        c1 /= d;
        c2 /= d;
        for (int j = 0; j < d; ++j) {
            const double dxh = dY.at(i, j) * gain[j];
            dX.at(i, j) = inv * (dxh - c1 - xhat[j] * c2);
        }
    }
    dX.ensure_finite("qk_normalize_backward");
    return dX;
}

Matrix apply_rope(const Matrix& m, double base) {
    require(m.cols % 2 == 0, "apply_rope: feature dimension must be even");
    require(base > 0.0, "apply_rope: base must be > 0");
    const int d = m.cols;
    Matrix out(m.rows, d);
    for (int p = 0; p < m.rows; ++p) {
        for (int k = 0; k < d / 2; ++k) {
            const double theta = p * std::pow(base, -2.0 * k / d);
            const double c = std::cos(theta), s = std::sin(theta);
            const double a = m.at(p, 2 * k), b = m.at(p, 2 * k + 1);
            out.at(p, 2 * k) = a * c - b * s;
            out.at(p, 2 * k + 1) = a * s + b * c;
        }
    }
    return out;
}

Matrix apply_rope_backward(const Matrix& dY, double base) {
    require(dY.cols % 2 == 0, "apply_rope_backward: feature dimension must be even");
    const int d = dY.cols;
    Matrix dX(dY.rows, d);
    for (int p = 0; p < dY.rows; ++p) {
        for (int k = 0; k < d / 2; ++k) {
            const double theta = p * std::pow(base, -2.0 * k / d);
            const double c = std::cos(theta), s = std::sin(theta);
            const double da = dY.at(p, 2 * k), db = dY.at(p, 2 * k + 1);
            dX.at(p, 2 * k) = da * c + db * s;
            dX.at(p, 2 * k + 1) = -da * s + db * c;
        }
    }
    return dX;
}

Matrix multihead_attn(const Matrix& X, const std::vector<Matrix>& Wq,
                      const std::vector<Matrix>& Wk, const std::vector<Matrix>& Wv,
                      const Matrix& Wo, const AttnConfig& cfg) {
    const size_t h = Wq.size();
    require(h >= 1, "multihead_attn: need at least one head");
    require(Wk.size() == h && Wv.size() == h, "multihead_attn: per-head weight counts disagree");
    const int d_v = Wv[0].cols;
    for (size_t i = 0; i < h; ++i) {
        require(Wq[i].rows == X.cols && Wk[i].rows == X.cols && Wv[i].rows == X.cols,
                "multihead_attn: projection rows must match X feature dimension");
        require(Wq[i].cols == Wk[i].cols, "multihead_attn: Q/K projection widths disagree");
        require(Wv[i].cols == d_v, "multihead_attn: V projection widths disagree");
    }
    require(Wo.rows == static_cast<int>(h) * d_v, "multihead_attn: Wo rows must equal heads*d_v");
    if (cfg.pos_bias.kind == PosBias::Kind::alibi)
        require(cfg.pos_bias.num_heads == static_cast<int>(h),
                "multihead_attn: alibi num_heads must match the head count");

    Matrix concat(X.rows, static_cast<int>(h) * d_v);
    for (size_t head = 0; head < h; ++head) {
        AttnConfig per_head = cfg;
        if (cfg.pos_bias.kind == PosBias::Kind::alibi) per_head.pos_bias.head = static_cast<int>(head);
        Matrix Qh = matmul(X, Wq[head]);
        Matrix Kh = matmul(X, Wk[head]);
        Matrix Vh = matmul(X, Wv[head]);
        AttnResult r = attn_forward(Qh, Kh, Vh, per_head);
        for (int i = 0; i < X.rows; ++i)
            for (int j = 0; j < d_v; ++j)
                concat.at(i, static_cast<int>(head) * d_v + j) = r.O.at(i, j);
    }
    return matmul(concat, Wo);
}

}  // namespace sigattn
