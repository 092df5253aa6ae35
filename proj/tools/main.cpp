// sigattn — command-line front end for the sigmoid-attention laboratory.
//
// Subcommands:
//   equiv      tiled-vs-naive kernel equivalence sweep (exit 1 on mismatch)
//   checkgrad  finite-difference audit of every analytic gradient path
//   theory     closed-form checks: bias | lipschitz | contextual | flops | hoyer
//   train      train a small transformer on a synthetic task, emit CSV + params
//   bench      kernel timing/memory table
//
// Conventions: exit 0 = pass, 1 = check failure or runtime failure, 2 = usage
// error. Long flags only. A JSON config file (--config) may supply any flag of
// the active subcommand; explicit command-line flags override it. Every command
// that writes files also writes the resolved configuration as config.json next
// to them. All output is deterministic for a fixed --seed and --threads 1
// (bench timing columns excepted; every other column is reproducible).

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sigattn/attn.hpp"
#include "sigattn/core.hpp"
#include "sigattn/flash.hpp"
#include "sigattn/nn.hpp"
#include "sigattn/theory.hpp"

using nlohmann::ordered_json;
using namespace sigattn;

namespace {

// ---------------------------------------------------------------- utilities

[[noreturn]] void usage_error(const std::string& msg) { throw std::invalid_argument(msg); }

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<int> parse_int_list(const std::string& s, int min_value, const char* what) {
    std::vector<int> out;
    for (const std::string& tok : split(s, ',')) {
        size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(tok, &used);
        } catch (const std::exception&) {
            usage_error(std::string(what) + ": cannot parse '" + tok + "'");
        }
        if (used != tok.size()) usage_error(std::string(what) + ": cannot parse '" + tok + "'");
        if (v < min_value)
            usage_error(std::string(what) + ": value " + tok + " is below the minimum " +
                        std::to_string(min_value));
        out.push_back(v);
    }
    return out;
}

std::vector<double> parse_double_list(const std::string& s, const char* what) {
    std::vector<double> out;
    for (const std::string& tok : split(s, ',')) {
        size_t used = 0;
        double v = 0;
        try {
            v = std::stod(tok, &used);
        } catch (const std::exception&) {
            usage_error(std::string(what) + ": cannot parse '" + tok + "'");
        }
        if (used != tok.size()) usage_error(std::string(what) + ": cannot parse '" + tok + "'");
        out.push_back(v);
    }
    return out;
}

// "8..14" (inclusive range) or "8,10,12"
std::vector<int> parse_lengths(const std::string& s) {
    const size_t dots = s.find("..");
    if (dots != std::string::npos) {
        const std::vector<int> lo = parse_int_list(s.substr(0, dots), 1, "--eval-lengths");
        const std::vector<int> hi = parse_int_list(s.substr(dots + 2), 1, "--eval-lengths");
        if (lo.size() != 1 || hi.size() != 1 || lo[0] > hi[0])
            usage_error("--eval-lengths: range must look like 8..14");
        std::vector<int> out;
        for (int v = lo[0]; v <= hi[0]; ++v) out.push_back(v);
        return out;
    }
    return parse_int_list(s, 1, "--eval-lengths");
}

std::vector<BlockSpec> parse_blocks_list(const std::string& s) {
    std::vector<BlockSpec> out;
    for (const std::string& pair : split(s, ';')) {
        const std::vector<int> rc = parse_int_list(pair, 1, "--blocks");
        if (rc.size() != 2) usage_error("--blocks: each entry must be rows,cols");
        out.push_back(BlockSpec{rc[0], rc[1]});
    }
    return out;
}

BiasSpec parse_bias(const std::string& s) {
    if (s == "none") return BiasSpec::none();
    if (s == "neg-log-n") return BiasSpec::neg_log_n();
    if (s == "neg-log-rowlen") return BiasSpec::neg_log_rowlen();
    const size_t colon = s.find(':');
    if (colon != std::string::npos) {
        const std::string kind = s.substr(0, colon);
        const std::vector<double> v = parse_double_list(s.substr(colon + 1), "--bias");
        if (v.size() == 1 && kind == "const") return BiasSpec::constant(v[0]);
        if (v.size() == 1 && kind == "learnable") return BiasSpec::learnable(v[0]);
    }
    usage_error("--bias: expected none | neg-log-n | neg-log-rowlen | const:<v> | learnable:<v>");
}

std::string bias_to_string(const BiasSpec& b) {
    switch (b.mode) {
        case BiasSpec::Mode::none: return "none";
        case BiasSpec::Mode::neg_log_n: return "neg-log-n";
        case BiasSpec::Mode::neg_log_rowlen: return "neg-log-rowlen";
        case BiasSpec::Mode::constant: return "const:" + fmt17(b.value);
        case BiasSpec::Mode::learnable: return "learnable:" + fmt17(b.value);
    }
    return "none";
}

Activation parse_activation(const std::string& s) {
    if (s == "softmax") return Activation::softmax;
    if (s == "sigmoid") return Activation::sigmoid;
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    usage_error("--attn: expected softmax | sigmoid | relu | tanh");
}

PosEmbed parse_pos(const std::string& s) {
    if (s == "none") return PosEmbed::none;
    if (s == "learnable") return PosEmbed::learnable;
    if (s == "sincos") return PosEmbed::sincos;
    if (s == "rope") return PosEmbed::rope;
    if (s == "alibi") return PosEmbed::alibi;
    usage_error("--pos: expected none | learnable | sincos | rope | alibi");
}

Schedule parse_schedule(const std::string& s) {
    if (s == "constant") return Schedule::constant;
    if (s == "warmup-cosine") return Schedule::warmup_cosine;
    usage_error("--schedule: expected constant | warmup-cosine");
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << content;
    if (!f) throw std::runtime_error("failed writing " + path);
}

void ensure_out_dir(const std::string& out) {
    if (!out.empty()) std::filesystem::create_directories(out);
}

void emit_report(const std::string& out, const char* name, const ordered_json& j) {
    const std::string text = j.dump(2) + "\n";
    std::fputs(text.c_str(), stdout);
    if (!out.empty()) {
        ensure_out_dir(out);
        write_text_file(out + "/" + name, text);
    }
}

void emit_config(const std::string& out, const ordered_json& j) {
    if (out.empty()) return;
    ensure_out_dir(out);
    write_text_file(out + "/config.json", j.dump(2) + "\n");
}

bool close_enough(double a, double b, double rtol, double atol) {
    return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

// relative disagreement, ignoring pairs that are both numerically tiny
double rel_err(double a, double b) {
    const double scale = std::max(std::abs(a), std::abs(b));
    if (scale < 1e-4) return 0.0;  // tiny entries are judged by the absolute floor instead
    return std::abs(a - b) / scale;
}

// disagreement normalized by the pass threshold: > 1 means the pair fails
double excess(double a, double b, double rtol, double atol) {
    return std::abs(a - b) / (atol + rtol * std::max(std::abs(a), std::abs(b)));
}

// ------------------------------------------------------------------- equiv

struct EquivOpts {
    std::string n_list = "16,130,257";
    int d = 8;
    std::string blocks;  // empty -> derived grid {1,3,32,64,n,n+7}^2
    std::uint64_t seed = 1;
    double tol = 1e-10;
    std::string out;
    int threads = 1;
    std::string config;
};

ordered_json equiv_config_json(const EquivOpts& o) {
    ordered_json j;
    j["schema"] = 1;
    j["command"] = "equiv";
    j["n"] = o.n_list;
    j["d"] = o.d;
    j["blocks"] = o.blocks;
    j["seed"] = o.seed;
    j["tol"] = o.tol;
    j["threads"] = o.threads;
    return j;
}

int run_equiv(const EquivOpts& o) {
    const std::vector<int> ns = parse_int_list(o.n_list, 1, "--n");
    if (o.threads < 1) usage_error("--threads must be >= 1");
    Rng rng(o.seed);
    std::string csv = "n,block_r,block_c,max_abs_err\n";
    double overall = 0.0;
    for (int n : ns) {
        const Matrix Q = rng_normal(rng, n, o.d);
        const Matrix K = rng_normal(rng, n, o.d);
        const Matrix V = rng_normal(rng, n, o.d);
        const Matrix dO = rng_normal(rng, n, o.d);

        std::vector<AttnConfig> cfgs;
        for (int causal = 0; causal < 2; ++causal)
            for (int variant = 0; variant < 4; ++variant) {
                AttnConfig cfg;
                cfg.activation = Activation::sigmoid;
                cfg.causal = causal == 1;
                cfg.bias = (variant & 1) ? BiasSpec::neg_log_n() : BiasSpec::none();
                if (variant & 2) cfg.pos_bias = PosBias::alibi(4, 1);
                cfgs.push_back(cfg);
            }
        std::vector<Matrix> ref_o;
        std::vector<GradTriple> ref_g;
        for (const AttnConfig& cfg : cfgs) {
            ref_o.push_back(attn_forward(Q, K, V, cfg).O);
            ref_g.push_back(attn_backward(Q, K, V, dO, cfg));
        }

        std::vector<int> sides;
        if (o.blocks.empty()) {
            for (int b : {1, 3, 32, 64, n, n + 7}) sides.push_back(b);
            std::sort(sides.begin(), sides.end());
            sides.erase(std::unique(sides.begin(), sides.end()), sides.end());
        }
        std::vector<BlockSpec> specs;
        if (o.blocks.empty()) {
            for (int br : sides)
                for (int bc : sides) specs.push_back(BlockSpec{br, bc});
        } else {
            specs = parse_blocks_list(o.blocks);
        }

        for (const BlockSpec& spec : specs) {
            double worst = 0.0;
            for (size_t ci = 0; ci < cfgs.size(); ++ci) {
                const Matrix fo = flash_forward(Q, K, V, cfgs[ci], spec, nullptr, o.threads).first;
                const GradTriple fg =
                    flash_backward(Q, K, V, dO, cfgs[ci], spec, nullptr, o.threads).first;
                worst = std::max(worst, max_abs_diff(fo, ref_o[ci]));
                worst = std::max(worst, max_abs_diff(fg.dQ, ref_g[ci].dQ));
                worst = std::max(worst, max_abs_diff(fg.dK, ref_g[ci].dK));
                worst = std::max(worst, max_abs_diff(fg.dV, ref_g[ci].dV));
            }
            overall = std::max(overall, worst);
            csv += std::to_string(n) + "," + std::to_string(spec.b_r) + "," +
                   std::to_string(spec.b_c) + "," + fmt17(worst) + "\n";
        }
    }
    csv += "overall,,," + fmt17(overall) + "\n";
    std::fputs(csv.c_str(), stdout);
    if (!o.out.empty()) {
        ensure_out_dir(o.out);
        write_text_file(o.out + "/equiv.csv", csv);
    }
    emit_config(o.out, equiv_config_json(o));
    const bool pass = overall <= o.tol;
    std::fprintf(stderr, "equiv: max abs error %s against tolerance %s -> %s\n",
                 fmt17(overall).c_str(), fmt17(o.tol).c_str(), pass ? "PASS" : "FAIL");
    return pass ? 0 : 1;
}

// --------------------------------------------------------------- checkgrad

struct CheckgradOpts {
    double h = 1e-6;
    double tol_attn = 1e-6;
    double tol_model = 1e-5;
    std::string activation;  // optional name filter
    std::uint64_t seed = 1;
    std::string out;
    int threads = 1;
    std::string config;
};

struct AxisResult {
    std::string axis;
    std::string kind;  // attn | attn-flash | model
    double worst = 0.0;
    double max_excess = 0.0;  // disagreement / allowance; pass iff <= 1 everywhere
    double tol = 0.0;
    bool pass = true;
};

// finite differences of sum(O .* W) against the analytic kernel backward
void checkgrad_attn_axis(const std::string& name, const AttnConfig& cfg, double h, double tol,
                         std::uint64_t seed, int threads, std::vector<AxisResult>& results) {
    const int n = 5, d = 4;
    Rng rng(seed);
    Matrix Q = rng_normal(rng, n, d), K = rng_normal(rng, n, d), V = rng_normal(rng, n, d);
    const Matrix W = rng_normal(rng, n, d);

    const auto loss = [&](const AttnConfig& c) {
        const Matrix O = attn_forward(Q, K, V, c).O;
        double s = 0.0;
        for (size_t i = 0; i < O.data.size(); ++i) s += O.data[i] * W.data[i];
        return s;
    };

    const bool flash_capable = cfg.activation == Activation::sigmoid && cfg.alpha == 0.0;
    double dbias_naive = 0.0, dbias_flash = 0.0;
    const bool learnable = cfg.bias.mode == BiasSpec::Mode::learnable;
    const GradTriple gn = attn_backward_ex(Q, K, V, W, cfg, learnable ? &dbias_naive : nullptr);
    GradTriple gf;
    if (flash_capable)
        gf = flash_backward(Q, K, V, W, cfg, BlockSpec{2, 3}, nullptr, threads,
                            learnable ? &dbias_flash : nullptr)
                 .first;

    AxisResult naive{name, "attn", 0.0, 0.0, tol, true};
    AxisResult flash{name, "attn-flash", 0.0, 0.0, tol, true};
    const auto record = [&](double analytic_naive, double analytic_flash, double fd) {
        naive.worst = std::max(naive.worst, rel_err(analytic_naive, fd));
        naive.max_excess = std::max(naive.max_excess, excess(analytic_naive, fd, tol, 1e-9));
        naive.pass = naive.pass && close_enough(analytic_naive, fd, tol, 1e-9);
        if (flash_capable) {
            flash.worst = std::max(flash.worst, rel_err(analytic_flash, fd));
            flash.max_excess = std::max(flash.max_excess, excess(analytic_flash, fd, tol, 1e-9));
            flash.pass = flash.pass && close_enough(analytic_flash, fd, tol, 1e-9);
        }
    };

    Matrix* inputs[3] = {&Q, &K, &V};
    const Matrix* analytic_n[3] = {&gn.dQ, &gn.dK, &gn.dV};
    const Matrix* analytic_f[3] = {&gf.dQ, &gf.dK, &gf.dV};
    for (int m = 0; m < 3; ++m)
        for (size_t e = 0; e < inputs[m]->data.size(); ++e) {
            const double saved = inputs[m]->data[e];
            inputs[m]->data[e] = saved + h;
            const double lp = loss(cfg);
            inputs[m]->data[e] = saved - h;
            const double lm = loss(cfg);
            inputs[m]->data[e] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            record(analytic_n[m]->data[e], flash_capable ? analytic_f[m]->data[e] : 0.0, fd);
        }
    if (learnable) {
        AttnConfig up = cfg, dn = cfg;
        up.bias.value += h;
        dn.bias.value -= h;
        const double fd = (loss(up) - loss(dn)) / (2.0 * h);
        record(dbias_naive, dbias_flash, fd);
    }
    results.push_back(naive);
    if (flash_capable) results.push_back(flash);
}

// finite differences of the training loss against the analytic model backward
void checkgrad_model_axis(const std::string& name, const ModelConfig& mc, const TaskSpec& task,
                          double h, double tol, std::uint64_t seed,
                          std::vector<AxisResult>& results) {
    Rng rng(seed);
    ModelParams P = init_model(mc, task, rng);
    const TaskBatch batch =
        task.kind == TaskKind::ksum
            ? gen_ksum(task.ksum_n, task.ksum_k, 3, rng)
            : gen_pair_repeat(task.vocab, task.len_lo, task.len_hi, task.max_len, 3, rng);
    std::vector<Matrix> grads = zero_grads(P);
    model_backward(P, batch, grads);
    AxisResult res{name, "model", 0.0, 0.0, tol, true};
    for (size_t i = 0; i < P.tensors.size(); ++i)
        for (size_t e = 0; e < P.tensors[i].data.size(); ++e) {
            const double saved = P.tensors[i].data[e];
            P.tensors[i].data[e] = saved + h;
            const double lp = model_loss(P, batch);
            P.tensors[i].data[e] = saved - h;
            const double lm = model_loss(P, batch);
            P.tensors[i].data[e] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            res.worst = std::max(res.worst, rel_err(grads[i].data[e], fd));
            res.max_excess = std::max(res.max_excess, excess(grads[i].data[e], fd, tol, 1e-9));
            res.pass = res.pass && close_enough(grads[i].data[e], fd, tol, 1e-9);
        }
    results.push_back(res);
}

int run_checkgrad(const CheckgradOpts& o) {
    if (o.h <= 0.0) usage_error("--h must be > 0");
    if (o.tol_attn <= 0.0 || o.tol_model <= 0.0) usage_error("tolerances must be > 0");
    if (o.threads < 1) usage_error("--threads must be >= 1");
    std::vector<AxisResult> results;

    const auto attn_axis = [&](const std::string& name, AttnConfig cfg) {
        if (!o.activation.empty() && name.find(o.activation) == std::string::npos) return;
        checkgrad_attn_axis(name, cfg, o.h, o.tol_attn, o.seed, o.threads, results);
    };
    {
        AttnConfig c;
        c.activation = Activation::softmax;
        attn_axis("softmax-full", c);
        c.causal = true;
        attn_axis("softmax-causal", c);
    }
    {
        AttnConfig c;
        c.activation = Activation::sigmoid;
        c.bias = BiasSpec::constant(-1.0);
        attn_axis("sigmoid-const-bias", c);
    }
    {
        AttnConfig c;
        c.activation = Activation::sigmoid;
        c.bias = BiasSpec::neg_log_n();
        c.pos_bias = PosBias::alibi(4, 1);
        c.causal = true;
        attn_axis("sigmoid-neg-log-n-alibi-causal", c);
    }
    {
        AttnConfig c;
        c.activation = Activation::sigmoid;
        c.bias = BiasSpec::learnable(-2.0);
        attn_axis("sigmoid-learnable-bias", c);
    }
    {
        AttnConfig c;
        c.activation = Activation::sigmoid;
        c.bias = BiasSpec::neg_log_rowlen();
        c.causal = true;
        attn_axis("sigmoid-rowlen-causal", c);
    }
    {
        AttnConfig c;
        c.activation = Activation::sigmoid;
        c.alpha = 1.0;
        attn_axis("sigmoid-alpha-1", c);
    }

    TaskSpec ks;
    ks.kind = TaskKind::ksum;
    ks.ksum_n = 2;
    ks.ksum_k = 1;
    TaskSpec pr;
    pr.kind = TaskKind::pair_repeat;
    pr.vocab = 3;
    pr.len_lo = 4;
    pr.len_hi = 4;
    pr.max_len = 5;

    ModelConfig base;
    base.d_model = 8;
    base.n_heads = 2;
    base.n_layers = 1;
    base.mlp_ratio = 2;
    base.activation = Activation::sigmoid;
    base.bias = BiasSpec::constant(-1.0);
    base.layerscale = true;
    base.layerscale_init = 0.1;
    base.pos = PosEmbed::learnable;

    const auto model_axis = [&](const std::string& name, const ModelConfig& mc,
                                const TaskSpec& task) {
        if (!o.activation.empty() && name.find(o.activation) == std::string::npos) return;
        checkgrad_model_axis(name, mc, task, o.h, o.tol_model, o.seed + 17, results);
    };
    model_axis("model-sigmoid-base", base, ks);
    {
        ModelConfig m = base;
        m.activation = Activation::softmax;
        m.bias = BiasSpec::none();
        model_axis("model-softmax", m, ks);
    }
    {
        ModelConfig m = base;
        m.bias = BiasSpec::none();
        model_axis("model-sigmoid-bias-none", m, ks);
    }
    {
        ModelConfig m = base;
        m.bias = BiasSpec::neg_log_n();
        model_axis("model-sigmoid-neg-log-n", m, ks);
    }
    {
        ModelConfig m = base;
        m.bias = BiasSpec::neg_log_rowlen();
        m.causal = true;
        model_axis("model-sigmoid-rowlen-causal", m, ks);
    }
    {
        ModelConfig m = base;
        m.bias = BiasSpec::learnable(-4.0);
        model_axis("model-sigmoid-learnable-bias", m, ks);
    }
    {
        ModelConfig m = base;
        m.qk_norm = true;
        model_axis("model-sigmoid-qk-norm", m, ks);
    }
    {
        ModelConfig m = base;
        m.layerscale = false;
        model_axis("model-sigmoid-no-layerscale", m, ks);
    }
    {
        ModelConfig m = base;
        m.pos = PosEmbed::none;
        model_axis("model-sigmoid-pos-none", m, ks);
    }
    {
        ModelConfig m = base;
        m.pos = PosEmbed::sincos;
        model_axis("model-sigmoid-sincos", m, ks);
    }
    {
        ModelConfig m = base;
        m.pos = PosEmbed::rope;
        model_axis("model-sigmoid-rope", m, ks);
    }
    {
        ModelConfig m = base;
        m.pos = PosEmbed::alibi;
        model_axis("model-sigmoid-alibi", m, ks);
    }
    {
        ModelConfig m = base;
        m.n_layers = 2;
        m.qk_norm = true;
        m.bias = BiasSpec::learnable(-2.0);
        model_axis("model-sigmoid-pair-2layer", m, pr);
    }
    {
        ModelConfig m = base;
        m.use_flash = true;
        model_axis("model-sigmoid-flash", m, ks);
    }

    std::string csv = "axis,kind,worst_rel_err,max_excess,tol,status\n";
    bool all_pass = true;
    for (const AxisResult& r : results) {
        all_pass = all_pass && r.pass;
        csv += r.axis + "," + r.kind + "," + fmt17(r.worst) + "," + fmt17(r.max_excess) + "," +
               fmt17(r.tol) + "," + (r.pass ? "pass" : "FAIL") + "\n";
    }
    std::fputs(csv.c_str(), stdout);
    if (!o.out.empty()) {
        ensure_out_dir(o.out);
        write_text_file(o.out + "/checkgrad.csv", csv);
        ordered_json j;
        j["schema"] = 1;
        j["command"] = "checkgrad";
        j["h"] = o.h;
        j["tol-attn"] = o.tol_attn;
        j["tol-model"] = o.tol_model;
        j["activation"] = o.activation;
        j["seed"] = o.seed;
        j["threads"] = o.threads;
        emit_config(o.out, j);
    }
    std::fprintf(stderr, "checkgrad: %zu axes -> %s\n", results.size(),
                 all_pass ? "PASS" : "FAIL");
    return all_pass ? 0 : 1;
}

// ------------------------------------------------------------------ theory

struct BiasOpts {
    int n = 0;
    std::string z = "0";
    double tol = 1e-12;
    std::string out;
    std::string config;
};

int run_theory_bias(const BiasOpts& o) {
    if (o.n < 2) usage_error("--n must be >= 2");
    std::vector<double> z = parse_double_list(o.z, "--z");
    if (z.size() == 1 && o.n > 1) z.assign(static_cast<size_t>(o.n), z[0]);
    if (static_cast<int>(z.size()) != o.n) usage_error("--z must have 1 or n entries");
    const double b = solve_bias(z, o.tol);
    double resid = 0.0;
    for (double zi : z) resid += sigmoid_via_tanh(zi + b);
    resid = std::abs(resid - 1.0);
    const double zmax = *std::max_element(z.begin(), z.end());
    const double zmin = *std::min_element(z.begin(), z.end());
    const double lo = -std::log(static_cast<double>(o.n) - 1.0) - zmax;
    const double hi = -std::log(static_cast<double>(o.n) - 1.0) - zmin;

    ordered_json j;
    j["schema"] = 1;
    j["command"] = "theory-bias";
    j["n"] = o.n;
    j["z"] = z;
    j["bias"] = b;
    j["residual"] = resid;
    j["bracket"] = {lo, hi};
    j["tol"] = o.tol;
    emit_report(o.out, "report.json", j);
    emit_config(o.out, j);  // inputs and results coincide for this check
    return resid <= o.tol ? 0 : 1;
}

struct LipschitzOpts {
    int n = 6, d = 3, dv = 3, trials = 20, iters = 50;
    double radius = 1.0;
    double bias_value = std::numeric_limits<double>::quiet_NaN();  // NaN -> -ln n
    std::uint64_t seed = 1;
    std::string out;
    std::string config;
};

int run_theory_lipschitz(const LipschitzOpts& o) {
    if (o.n < 1 || o.d < 1 || o.dv < 1) usage_error("--n/--d/--dv must be >= 1");
    if (o.trials < 1) usage_error("--trials must be >= 1");
    if (o.radius <= 0.0) usage_error("--radius must be > 0");
    const double b = std::isnan(o.bias_value) ? -std::log(static_cast<double>(o.n)) : o.bias_value;
    Rng rng(o.seed);
    int violations = 0;
    double max_ratio = 0.0;
    ordered_json worst;
    for (int t = 0; t < o.trials; ++t) {
        const Matrix Wq = rng_normal(rng, o.d, o.d);
        const Matrix Wk = rng_normal(rng, o.d, o.d);
        const Matrix Wv = rng_normal(rng, o.d, o.dv);
        const Matrix X = scaled(rng_normal(rng, o.n, o.d), o.radius);
        const LipschitzReport rep = lipschitz_bound(Wq, Wk, Wv, X, b);
        std::string method;
        const double emp =
            empirical_jacobian_norm(X, Wq, Wk, Wv, b, o.iters, rng.next_u64(), &method);
        const double ratio = rep.bound > 0.0 ? emp / rep.bound : 0.0;
        const bool violated = emp > rep.bound * (1.0 + 1e-9);
        violations += violated;
        if (ratio >= max_ratio) {
            max_ratio = ratio;
            worst = ordered_json{{"trial", t},
                                 {"empirical", emp},
                                 {"method", method},
                                 {"bound", rep.bound},
                                 {"sigma_inf", rep.sigma_inf},
                                 {"sigma_prime_inf", rep.sigma_prime_inf},
                                 {"a_spec", rep.a_spec},
                                 {"mean_sq_norm", rep.mean_sq_norm},
                                 {"wv_spec", rep.wv_spec},
                                 {"sigma_inf_cap", rep.sigma_inf_cap},
                                 {"sigma_prime_inf_cap", rep.sigma_prime_inf_cap}};
        }
    }
    ordered_json j;
    j["schema"] = 1;
    j["command"] = "theory-lipschitz";
    j["n"] = o.n;
    j["d"] = o.d;
    j["dv"] = o.dv;
    j["trials"] = o.trials;
    j["iters"] = o.iters;
    j["radius"] = o.radius;
    j["bias"] = b;
    j["seed"] = o.seed;
    j["violations"] = violations;
    j["max_ratio"] = max_ratio;
    j["worst_trial"] = worst;
    emit_report(o.out, "report.json", j);
    emit_config(o.out, j);
    return violations == 0 ? 0 : 1;
}

struct ContextualOpts {
    double delta = 0.0;
    int d = 1, n = 0;
    double c = 0.0;
    std::string out;
    std::string config;
};

int run_theory_contextual(const ContextualOpts& o) {
    const ContextualReport r = contextual_mapping_check(o.delta, o.d, o.n, o.c);
    const bool pass = r.precondition_ok && r.within_distinct && r.cross_distinct &&
                      r.monotone_ok && r.bounds_ok;
    ordered_json j;
    j["schema"] = 1;
    j["command"] = "theory-contextual";
    j["delta"] = o.delta;
    j["d"] = o.d;
    j["n"] = o.n;
    j["c"] = o.c;
    j["precondition_ok"] = r.precondition_ok;
    j["c_threshold"] = r.c_threshold;
    j["note"] = r.note;
    j["sequences"] = r.sequences;
    j["within_pairs"] = r.within_pairs;
    j["cross_pairs"] = r.cross_pairs;
    j["within_distinct"] = r.within_distinct;
    j["cross_distinct"] = r.cross_distinct;
    j["monotone_ok"] = r.monotone_ok;
    j["bounds_ok"] = r.bounds_ok;
    j["min_separation"] = r.min_separation;
    j["summary"] = pass ? "both properties hold"
                        : (r.precondition_ok ? "property violated" : "precondition rejected");
    emit_report(o.out, "report.json", j);
    emit_config(o.out, j);
    return pass ? 0 : 1;
}

struct FlopsOpts {
    int nctx = 0, dhead = 0;
    bool causal = false;
    std::string out;
    std::string config;
};

int run_theory_flops(const FlopsOpts& o) {
    const FlopCounts soft = flop_count(o.nctx, o.dhead, o.causal, Activation::softmax);
    const FlopCounts sigm = flop_count(o.nctx, o.dhead, o.causal, Activation::sigmoid);
    ordered_json j;
    j["schema"] = 1;
    j["command"] = "theory-flops";
    j["n_ctx"] = o.nctx;
    j["d_head"] = o.dhead;
    j["causal"] = o.causal;
    j["c"] = soft.c;
    j["c_fraction"] = {soft.c_num, soft.c_den};
    j["logit_flops"] = soft.logit_flops;
    j["softmax_activation_flops"] = soft.activation_flops;
    j["sigmoid_activation_flops"] = sigm.activation_flops;
    j["activation_difference"] = sigm.activation_flops - soft.activation_flops;
    j["delta"] = soft.delta;
    j["summary"] = fmt17(soft.logit_flops) + "/" + fmt17(soft.activation_flops) + "/" +
                   fmt17(sigm.activation_flops) + " delta=1/" + std::to_string(o.dhead);
    emit_report(o.out, "report.json", j);
    emit_config(o.out, j);
    return 0;
}

struct HoyerOpts {
    std::string values;
    std::string out;
    std::string config;
};

int run_theory_hoyer(const HoyerOpts& o) {
    const std::vector<double> v = parse_double_list(o.values, "--values");
    const double hv = hoyer_sparsity(v);
    ordered_json j;
    j["schema"] = 1;
    j["command"] = "theory-hoyer";
    j["values"] = v;
    j["hoyer"] = hv;
    emit_report(o.out, "report.json", j);
    emit_config(o.out, j);
    return 0;
}

// ------------------------------------------------------------------- train

struct TrainOpts {
    std::string task_pos;   // positional
    std::string task_flag;  // --task (config files)
    int n = 10, k = 1;
    int vocab = 5, len_lo = 8, len_hi = 10, max_len = 14;
    int d_model = 64, heads = 4, layers = 1, mlp_ratio = 4;
    std::string attn = "sigmoid";
    std::string bias = "none";
    double alpha = 0.0;
    bool causal = false;
    bool qk_norm = false;
    std::string pos = "learnable";
    bool layerscale = true;
    double layerscale_init = 1e-4;
    bool flash = false;
    long long steps = 20000;
    int batch = 32;
    double lr = 1e-3;
    std::string schedule = "constant";
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, clip = 0.0;
    long long metrics_every = 100;
    double stop_loss = -1.0, stop_acc = -1.0;
    int window = 50;
    std::uint64_t seed = 1;
    std::string eval_lengths;
    int eval_samples = 2000;
    std::string out = "train_out";
    int threads = 1;
    std::string config;
};

int run_train(const TrainOpts& o) {
    const std::string task_name = !o.task_pos.empty() ? o.task_pos : o.task_flag;
    if (task_name != "ksum" && task_name != "pair-repeat")
        usage_error("train: task must be ksum or pair-repeat");
    if (o.threads < 1) usage_error("--threads must be >= 1");

    TaskSpec task;
    if (task_name == "ksum") {
        task.kind = TaskKind::ksum;
        task.ksum_n = o.n;
        task.ksum_k = o.k;
    } else {
        task.kind = TaskKind::pair_repeat;
        task.vocab = o.vocab;
        task.len_lo = o.len_lo;
        task.len_hi = o.len_hi;
        task.max_len = o.max_len;
    }
    ModelConfig mc;
    mc.d_model = o.d_model;
    mc.n_heads = o.heads;
    mc.n_layers = o.layers;
    mc.mlp_ratio = o.mlp_ratio;
    mc.activation = parse_activation(o.attn);
    mc.bias = parse_bias(o.bias);
    mc.alpha = o.alpha;
    mc.causal = o.causal;
    mc.qk_norm = o.qk_norm;
    mc.pos = parse_pos(o.pos);
    mc.layerscale = o.layerscale;
    mc.layerscale_init = o.layerscale_init;
    mc.use_flash = o.flash;
    TrainConfig tc;
    tc.steps = o.steps;
    tc.batch = o.batch;
    tc.lr = o.lr;
    tc.schedule = parse_schedule(o.schedule);
    tc.beta1 = o.beta1;
    tc.beta2 = o.beta2;
    tc.adam_eps = o.adam_eps;
    tc.clip = o.clip;
    tc.metrics_every = o.metrics_every;
    tc.stop_loss = o.stop_loss;
    tc.stop_acc = o.stop_acc;
    tc.smooth_window = o.window;
    tc.seed = o.seed;
    task.validate();
    mc.validate();
    tc.validate();

    std::vector<int> eval_lens;
    if (!o.eval_lengths.empty()) {
        if (task.kind != TaskKind::pair_repeat)
            usage_error("--eval-lengths applies to the pair-repeat task only");
        eval_lens = parse_lengths(o.eval_lengths);
        if (o.eval_samples < 1) usage_error("--eval-samples must be >= 1");
        for (int L : eval_lens)
            if (L < 4 || L > task.max_len)
                usage_error("--eval-lengths: lengths must lie in [4, max-len]");
    }

    ordered_json cfg;
    cfg["schema"] = 1;
    cfg["command"] = "train";
    cfg["task"] = task_name;
    if (task.kind == TaskKind::ksum) {
        cfg["n"] = task.ksum_n;
        cfg["k"] = task.ksum_k;
    } else {
        cfg["vocab"] = task.vocab;
        cfg["len-lo"] = task.len_lo;
        cfg["len-hi"] = task.len_hi;
        cfg["max-len"] = task.max_len;
    }
    cfg["d-model"] = mc.d_model;
    cfg["heads"] = mc.n_heads;
    cfg["layers"] = mc.n_layers;
    cfg["mlp-ratio"] = mc.mlp_ratio;
    cfg["attn"] = o.attn;
    cfg["bias"] = bias_to_string(mc.bias);
    cfg["alpha"] = mc.alpha;
    cfg["causal"] = mc.causal;
    cfg["qk-norm"] = mc.qk_norm;
    cfg["pos"] = o.pos;
    cfg["layerscale"] = mc.layerscale;
    cfg["layerscale-init"] = mc.layerscale_init;
    cfg["flash"] = mc.use_flash;
    cfg["steps"] = tc.steps;
    cfg["batch"] = tc.batch;
    cfg["lr"] = tc.lr;
    cfg["schedule"] = o.schedule;
    cfg["beta1"] = tc.beta1;
    cfg["beta2"] = tc.beta2;
    cfg["adam-eps"] = tc.adam_eps;
    cfg["clip"] = tc.clip;
    cfg["metrics-every"] = tc.metrics_every;
    cfg["stop-loss"] = tc.stop_loss;
    cfg["stop-acc"] = tc.stop_acc;
    cfg["window"] = tc.smooth_window;
    cfg["seed"] = tc.seed;
    cfg["eval-lengths"] = o.eval_lengths;
    cfg["eval-samples"] = o.eval_samples;
    cfg["out"] = o.out;
    cfg["threads"] = o.threads;
    emit_config(o.out, cfg);

    const TrainResult r = train(mc, task, tc);

    const bool with_acc = task.kind == TaskKind::pair_repeat;
    if (!o.out.empty()) {
        ensure_out_dir(o.out);
        write_metrics_csv(o.out + "/metrics.csv", r.metrics, mc.n_layers, with_acc);
        save_params(r.params, o.out + "/params.bin", o.out + "/params.json");
    }

    std::string stdout_text = "final_loss " + fmt17(r.final_loss) + "\n";
    if (with_acc) stdout_text += "final_accuracy " + fmt17(r.final_accuracy) + "\n";
    stdout_text += "steps_run " + std::to_string(r.steps_run) + "\n";
    stdout_text += "samples_seen " + std::to_string(r.samples_seen) + "\n";

    if (!eval_lens.empty()) {
        Rng eval_rng(tc.seed ^ 0xe7a1ULL);
        const std::vector<LengthReport> rep =
            eval_length_generalization(r.params, eval_lens, o.eval_samples, eval_rng);
        std::string table = "length,accuracy,samples\n";
        for (const LengthReport& lr : rep)
            table += std::to_string(lr.length) + "," + fmt17(lr.accuracy) + "," +
                     std::to_string(lr.samples) + "\n";
        stdout_text += table;
        if (!o.out.empty()) write_text_file(o.out + "/eval.csv", table);
    }
    std::fputs(stdout_text.c_str(), stdout);
    return 0;
}

// ------------------------------------------------------------------- bench

struct BenchOpts {
    std::string n_list = "512,2048";
    int d = 64;
    std::string blocks = "128,128";
    int reps = 3;
    int naive_threshold = 4096;
    std::string out;
    int threads = 1;
    std::string config;
};

int run_bench(const BenchOpts& o) {
    const std::vector<int> ns = parse_int_list(o.n_list, 1, "--n");
    const std::vector<BlockSpec> specs = parse_blocks_list(o.blocks);
    if (o.threads < 1) usage_error("--threads must be >= 1");
    std::string csv = "n,d,path,block_r,block_c,reps,skipped,median_ns,aux_floats\n";
    for (int n : ns) {
        for (size_t si = 0; si < specs.size(); ++si) {
            const BenchReport rep = kernel_bench(n, o.d, specs[si], o.reps, o.naive_threshold);
            for (const BenchCell& cell : rep.cells) {
                const bool is_naive = cell.path.rfind("naive", 0) == 0;
                if (is_naive && si > 0) continue;  // naive rows do not depend on blocks
                csv += std::to_string(cell.n) + "," + std::to_string(cell.d) + "," + cell.path +
                       "," + std::to_string(cell.b_r) + "," + std::to_string(cell.b_c) + "," +
                       std::to_string(cell.samples_ns.size()) + "," +
                       (cell.skipped ? "1" : "0") + "," +
                       (cell.skipped ? std::string() : fmt17(cell.median_ns)) + "," +
                       std::to_string(cell.aux_floats) + "\n";
            }
        }
    }
    std::fputs(csv.c_str(), stdout);
    if (!o.out.empty()) {
        ensure_out_dir(o.out);
        write_text_file(o.out + "/bench.csv", csv);
        ordered_json j;
        j["schema"] = 1;
        j["command"] = "bench";
        j["n"] = o.n_list;
        j["d"] = o.d;
        j["blocks"] = o.blocks;
        j["reps"] = o.reps;
        j["naive-threshold"] = o.naive_threshold;
        j["threads"] = o.threads;
        emit_config(o.out, j);
    }
    return 0;
}

// -------------------------------------------------------- config-file merge

// Find the --config value without a full parse (so the file can be merged
// before parsing). Returns empty when absent.
std::string prescan_config_path(const std::vector<std::string>& args) {
    for (size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
    }
    return {};
}

// Translate {"key": value} pairs into command-line tokens for the active
// subcommand, validating keys against its option table. Unknown keys reject.
std::vector<std::string> config_tokens(const nlohmann::json& j, const CLI::App* sub) {
    std::vector<std::string> tokens;
    for (const auto& [key, value] : j.items()) {
        if (key == "config") usage_error("config file: a config file cannot set --config");
        const CLI::Option* match = nullptr;
        for (const CLI::Option* opt : sub->get_options()) {
            for (const std::string& lname : opt->get_lnames())
                if (lname == key || lname == "no-" + key) {
                    match = opt;
                    break;
                }
            if (match) break;
        }
        if (!match) usage_error("config file: unknown key '" + key + "' for this command");
        if (value.is_boolean()) {
            tokens.push_back(value.get<bool>() ? "--" + key : "--no-" + key);
        } else if (value.is_string()) {
            tokens.push_back("--" + key);
            tokens.push_back(value.get<std::string>());
        } else if (value.is_number_integer()) {
            tokens.push_back("--" + key);
            tokens.push_back(std::to_string(value.get<long long>()));
        } else if (value.is_number_unsigned()) {
            tokens.push_back("--" + key);
            tokens.push_back(std::to_string(value.get<unsigned long long>()));
        } else if (value.is_number_float()) {
            tokens.push_back("--" + key);
            tokens.push_back(fmt17(value.get<double>()));
        } else if (value.is_array()) {
            std::string joined;
            for (const auto& el : value) {
                if (!joined.empty()) joined += ",";
                if (el.is_string())
                    joined += el.get<std::string>();
                else if (el.is_number_integer())
                    joined += std::to_string(el.get<long long>());
                else if (el.is_number_float())
                    joined += fmt17(el.get<double>());
                else
                    usage_error("config file: unsupported array element type for '" + key + "'");
            }
            tokens.push_back("--" + key);
            tokens.push_back(joined);
        } else {
            usage_error("config file: unsupported value type for '" + key + "'");
        }
    }
    return tokens;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sigmoid-attention laboratory: kernels, gradients, theory checks, training"};
    app.require_subcommand(1);
    app.set_help_flag("--help", "print help");  // long flags only; frees --h for checkgrad

    EquivOpts eo;
    CheckgradOpts go;
    BiasOpts bo;
    LipschitzOpts lo;
    ContextualOpts co;
    FlopsOpts fo;
    HoyerOpts ho;
    TrainOpts to;
    BenchOpts be;

    CLI::App* equiv = app.add_subcommand("equiv", "tiled-vs-naive kernel equivalence sweep");
    equiv->set_help_flag("--help", "print help");
    equiv->add_option("--n", eo.n_list, "comma list of sequence lengths");
    equiv->add_option("--d", eo.d, "head dimension")->check(CLI::PositiveNumber);
    equiv->add_option("--blocks", eo.blocks,
                      "single rows,cols pair (default: derived grid per length)");
    equiv->add_option("--seed", eo.seed, "random seed");
    equiv->add_option("--tol", eo.tol, "max-abs tolerance");
    equiv->add_option("--out", eo.out, "output directory (optional)");
    equiv->add_option("--threads", eo.threads, "worker threads for the tiled kernel");
    equiv->add_option("--config", eo.config, "JSON config file; command line overrides");

    CLI::App* checkgrad =
        app.add_subcommand("checkgrad", "finite-difference audit of analytic gradients");
    checkgrad->set_help_flag("--help", "print help");
    checkgrad->add_option("--h", go.h, "central-difference step");
    checkgrad->add_option("--tol-attn", go.tol_attn, "relative tolerance, attention kernels");
    checkgrad->add_option("--tol-model", go.tol_model, "relative tolerance, full model");
    checkgrad->add_option("--activation", go.activation, "only run axes whose name contains this");
    checkgrad->add_option("--seed", go.seed, "random seed");
    checkgrad->add_option("--out", go.out, "output directory (optional)");
    checkgrad->add_option("--threads", go.threads, "worker threads for the tiled kernel");
    checkgrad->add_option("--config", go.config, "JSON config file; command line overrides");

    CLI::App* theory = app.add_subcommand("theory", "closed-form checks and reports");
    theory->set_help_flag("--help", "print help");
    theory->require_subcommand(1);
    CLI::App* th_bias =
        theory->add_subcommand("bias", "solve for the logit offset normalizing a sigmoid row");
    th_bias->set_help_flag("--help", "print help");
    th_bias->add_option("--n", bo.n, "row length")->required();
    th_bias->add_option("--z", bo.z, "logits: one value (replicated) or a comma list");
    th_bias->add_option("--tol", bo.tol, "residual tolerance");
    th_bias->add_option("--out", bo.out, "output directory (optional)");
    th_bias->add_option("--config", bo.config, "JSON config file; command line overrides");

    CLI::App* th_lip = theory->add_subcommand(
        "lipschitz", "empirical Jacobian norms against the closed-form bound");
    th_lip->set_help_flag("--help", "print help");
    th_lip->add_option("--n", lo.n, "tokens per instance");
    th_lip->add_option("--d", lo.d, "embedding dimension");
    th_lip->add_option("--dv", lo.dv, "value dimension");
    th_lip->add_option("--trials", lo.trials, "random instances");
    th_lip->add_option("--iters", lo.iters, "power/spectral iterations");
    th_lip->add_option("--radius", lo.radius, "input scale factor");
    th_lip->add_option("--bias-value", lo.bias_value, "logit offset (default: -ln n)");
    th_lip->add_option("--seed", lo.seed, "random seed");
    th_lip->add_option("--out", lo.out, "output directory (optional)");
    th_lip->add_option("--config", lo.config, "JSON config file; command line overrides");

    CLI::App* th_ctx = theory->add_subcommand(
        "contextual", "exhaustive distinctness check of the shift construction");
    th_ctx->set_help_flag("--help", "print help");
    th_ctx->add_option("--delta", co.delta, "grid resolution (negative power of two)")->required();
    th_ctx->add_option("--d", co.d, "token dimension");
    th_ctx->add_option("--n", co.n, "sequence length")->required();
    th_ctx->add_option("--c", co.c, "shift base")->required();
    th_ctx->add_option("--out", co.out, "output directory (optional)");
    th_ctx->add_option("--config", co.config, "JSON config file; command line overrides");

    CLI::App* th_flops =
        theory->add_subcommand("flops", "activation flop table for one attention row block");
    th_flops->set_help_flag("--help", "print help");
    th_flops->add_option("--nctx", fo.nctx, "context length")->required();
    th_flops->add_option("--dhead", fo.dhead, "head dimension")->required();
    th_flops->add_flag("--causal,!--no-causal", fo.causal, "causal masking");
    th_flops->add_option("--out", fo.out, "output directory (optional)");
    th_flops->add_option("--config", fo.config, "JSON config file; command line overrides");

    CLI::App* th_hoyer = theory->add_subcommand("hoyer", "sparsity score of a value list");
    th_hoyer->set_help_flag("--help", "print help");
    th_hoyer->add_option("--values", ho.values, "comma list of nonnegative values")->required();
    th_hoyer->add_option("--out", ho.out, "output directory (optional)");
    th_hoyer->add_option("--config", ho.config, "JSON config file; command line overrides");

    CLI::App* train_cmd =
        app.add_subcommand("train", "train a small transformer on a synthetic task");
    train_cmd->set_help_flag("--help", "print help");
    train_cmd->add_option("TASK", to.task_pos, "ksum | pair-repeat");
    train_cmd->add_option("--task", to.task_flag, "task name (alternative to the positional)");
    train_cmd->add_option("--n", to.n, "ksum: number of values");
    train_cmd->add_option("--k", to.k, "ksum: number of selected values");
    train_cmd->add_option("--vocab", to.vocab, "pair-repeat: alphabet size");
    train_cmd->add_option("--len-lo", to.len_lo, "pair-repeat: shortest training length");
    train_cmd->add_option("--len-hi", to.len_hi, "pair-repeat: longest training length");
    train_cmd->add_option("--max-len", to.max_len, "pair-repeat: padded width");
    train_cmd->add_option("--d-model", to.d_model, "model width");
    train_cmd->add_option("--heads", to.heads, "attention heads");
    train_cmd->add_option("--layers", to.layers, "transformer blocks");
    train_cmd->add_option("--mlp-ratio", to.mlp_ratio, "MLP expansion factor");
    train_cmd->add_option("--attn", to.attn, "softmax | sigmoid | relu | tanh");
    train_cmd->add_option("--bias", to.bias,
                          "none | neg-log-n | neg-log-rowlen | const:<v> | learnable:<v>");
    train_cmd->add_option("--alpha", to.alpha, "row-length normalization exponent");
    train_cmd->add_flag("--causal,!--no-causal", to.causal, "causal masking");
    train_cmd->add_flag("--qk-norm,!--no-qk-norm", to.qk_norm, "normalize queries and keys");
    train_cmd->add_option("--pos", to.pos, "none | learnable | sincos | rope | alibi");
    train_cmd->add_flag("--layerscale,!--no-layerscale", to.layerscale,
                        "per-channel residual gains");
    train_cmd->add_option("--layerscale-init", to.layerscale_init, "residual gain init");
    train_cmd->add_flag("--flash,!--no-flash", to.flash, "use the tiled kernel in training");
    train_cmd->add_option("--steps", to.steps, "max optimizer steps");
    train_cmd->add_option("--batch", to.batch, "sequences per step");
    train_cmd->add_option("--lr", to.lr, "peak learning rate");
    train_cmd->add_option("--schedule", to.schedule, "constant | warmup-cosine");
    train_cmd->add_option("--beta1", to.beta1, "Adam beta1");
    train_cmd->add_option("--beta2", to.beta2, "Adam beta2");
    train_cmd->add_option("--adam-eps", to.adam_eps, "Adam epsilon");
    train_cmd->add_option("--clip", to.clip, "gradient-norm clip (0 = off)");
    train_cmd->add_option("--metrics-every", to.metrics_every, "record metrics every this many steps");
    train_cmd->add_option("--stop-loss", to.stop_loss, "stop when smoothed loss falls below");
    train_cmd->add_option("--stop-acc", to.stop_acc, "stop when smoothed accuracy exceeds");
    train_cmd->add_option("--window", to.window, "smoothing window for stopping and finals");
    train_cmd->add_option("--seed", to.seed, "random seed");
    train_cmd->add_option("--eval-lengths", to.eval_lengths,
                          "pair-repeat: lengths to evaluate, e.g. 6..14 or 8,10,12");
    train_cmd->add_option("--eval-samples", to.eval_samples, "samples per evaluated length");
    train_cmd->add_option("--out", to.out, "output directory");
    train_cmd->add_option("--threads", to.threads, "worker threads");
    train_cmd->add_option("--config", to.config, "JSON config file; command line overrides");

    CLI::App* bench = app.add_subcommand("bench", "kernel timing/memory table");
    bench->set_help_flag("--help", "print help");
    bench->add_option("--n", be.n_list, "comma list of sequence lengths");
    bench->add_option("--d", be.d, "head dimension")->check(CLI::PositiveNumber);
    bench->add_option("--blocks", be.blocks, "semicolon list of rows,cols pairs");
    bench->add_option("--reps", be.reps, "timing repetitions (median reported)");
    bench->add_option("--naive-threshold", be.naive_threshold,
                      "skip the quadratic reference above this length");
    bench->add_option("--out", be.out, "output directory (optional)");
    bench->add_option("--threads", be.threads, "worker threads");
    bench->add_option("--config", be.config, "JSON config file; command line overrides");

    // later occurrences override earlier ones so config-file tokens can precede
    // the user's explicit flags
    for (CLI::App* sub : {equiv, checkgrad, th_bias, th_lip, th_ctx, th_flops, th_hoyer,
                          train_cmd, bench})
        for (CLI::Option* opt : sub->get_options())
            opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        const std::string cfg_path = prescan_config_path(args);
        if (!cfg_path.empty()) {
            // resolve the active subcommand from the leading word(s)
            const CLI::App* sub = nullptr;
            size_t lead = 0;
            while (lead < args.size() && args[lead].rfind("-", 0) != 0) ++lead;
            if (lead >= 1) {
                for (const CLI::App* s : app.get_subcommands({}))
                    if (s->get_name() == args[0]) sub = s;
                if (sub && sub->get_name() == "theory" && lead >= 2) {
                    const CLI::App* inner = nullptr;
                    for (const CLI::App* s : sub->get_subcommands({}))
                        if (s->get_name() == args[1]) inner = s;
                    sub = inner;
                }
            }
            if (!sub) usage_error("--config requires a subcommand to apply it to");
            std::ifstream f(cfg_path);
            if (!f) usage_error("cannot open config file " + cfg_path);
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(f);
            } catch (const nlohmann::json::parse_error& e) {
                usage_error("config file " + cfg_path + ": " + e.what());
            }
            if (!j.is_object()) usage_error("config file must hold a JSON object");
            // config keys may not override the positional task word
            if (sub == train_cmd && args.size() > 1 && args[1].rfind("-", 0) != 0 &&
                j.contains("task"))
                j.erase("task");
            const std::vector<std::string> extra = config_tokens(j, sub);
            args.insert(args.begin() + static_cast<std::ptrdiff_t>(lead), extra.begin(),
                        extra.end());
        }

        std::vector<const char*> cargv;
        cargv.push_back("sigattn");
        for (const std::string& a : args) cargv.push_back(a.c_str());
        try {
            app.parse(static_cast<int>(cargv.size()), cargv.data());
        } catch (const CLI::CallForHelp& e) {
            return app.exit(e);
        } catch (const CLI::CallForAllHelp& e) {
            return app.exit(e);
        } catch (const CLI::ParseError& e) {
            app.exit(e);
            return 2;
        }

        if (equiv->parsed()) return run_equiv(eo);
        if (checkgrad->parsed()) return run_checkgrad(go);
        if (theory->parsed()) {
            if (th_bias->parsed()) return run_theory_bias(bo);
            if (th_lip->parsed()) return run_theory_lipschitz(lo);
            if (th_ctx->parsed()) return run_theory_contextual(co);
            if (th_flops->parsed()) return run_theory_flops(fo);
            if (th_hoyer->parsed()) return run_theory_hoyer(ho);
        }
        if (train_cmd->parsed()) return run_train(to);
        if (bench->parsed()) return run_bench(be);
        usage_error("no subcommand given");
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
