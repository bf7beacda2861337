#pragma once

// Transformer scanpath policy: patch-based vision encoder, cross-attention
// viewer encoder, and an autoregressive decoder that emits a (mixture of)
// diagonal Gaussian(s) over pre-squash (x, y, t) for every fixation after
// the first.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <algorithm>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scanflow/autodiff.hpp"
#include "scanflow/core.hpp"

namespace scanflow {

using ad::Matrix;
using ad::Tape;
using ad::Var;

enum class Mode { Population, Individual };
enum class RolloutMode { Sample, Greedy };

inline const char* to_string(Mode m) { return m == Mode::Population ? "population" : "individual"; }
inline const char* to_string(RolloutMode m) { return m == RolloutMode::Sample ? "sample" : "greedy"; }

inline Mode parse_mode(const std::string& s) {
    if (s == "population") return Mode::Population;
    if (s == "individual") return Mode::Individual;
    throw ValidationError("mode must be 'population' or 'individual'", "mode");
}

inline RolloutMode parse_rollout_mode(const std::string& s) {
    if (s == "sample") return RolloutMode::Sample;
    if (s == "greedy") return RolloutMode::Greedy;
    throw ValidationError("rollout mode must be 'sample' or 'greedy'", "mode");
}

struct ModelConfig {
    int w_inp = 64;
    int h_inp = 64;
    int patch = 16;
    int d_model = 64;
    int depth = 2;           // encoder layers
    int heads = 4;
    int decoder_depth = 2;
    int viewer_layers = 2;
    int mlp_ratio = 2;
    int T = 8;               // scanpath length, first fixation included
    int K = 1;               // mixture components
    int n_tok = 4;           // viewer embedding rows
    Mode mode = Mode::Population;
    double t_default = 0.3;  // duration of the fixed first fixation, s
    double min_scale = 1e-3; // floor on per-dimension standard deviations
    std::uint64_t seed = 0;

    int patches() const { return (w_inp / patch) * (h_inp / patch); }
    int patch_dim() const { return patch * patch * 3; }

    void validate() const {
        if (w_inp <= 0 || h_inp <= 0 || patch <= 0) throw ValidationError("input and patch sizes must be positive", "patch");
        if (w_inp % patch || h_inp % patch) throw ValidationError("input size must be divisible by patch size", "patch");
        if (d_model <= 0 || heads <= 0 || d_model % heads) throw ValidationError("heads must divide d_model", "heads");
        if (depth < 1) throw ValidationError("encoder depth must be >= 1", "depth");
        if (decoder_depth < 1) throw ValidationError("decoder depth must be >= 1", "decoder_depth");
        if (viewer_layers < 1) throw ValidationError("viewer_layers must be >= 1", "viewer_layers");
        if (mlp_ratio < 1) throw ValidationError("mlp_ratio must be >= 1", "mlp_ratio");
        if (T < 2) throw ValidationError("T must be >= 2", "T");
        if (K < 1) throw ValidationError("K must be >= 1", "K");
        if (n_tok < 1) throw ValidationError("n_tok must be >= 1", "n_tok");
        if (!(t_default > 0)) throw ValidationError("t_default must be positive", "t_default");
        if (!(min_scale > 0)) throw ValidationError("min_scale must be positive", "min_scale");
    }

    // Full-size preset: 224x224 input, 16px patches, 12 encoder layers.
    static ModelConfig large() {
        ModelConfig c;
        c.w_inp = c.h_inp = 224;
        c.patch = 16;
        c.d_model = 768;
        c.depth = 12;
        c.heads = 12;
        c.decoder_depth = 4;
        c.mlp_ratio = 4;
        c.T = 15;
        return c;
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"w_inp", c.w_inp},         {"h_inp", c.h_inp},       {"patch", c.patch},
                       {"d_model", c.d_model},     {"depth", c.depth},       {"heads", c.heads},
                       {"decoder_depth", c.decoder_depth}, {"viewer_layers", c.viewer_layers},
                       {"mlp_ratio", c.mlp_ratio}, {"T", c.T},               {"K", c.K},
                       {"n_tok", c.n_tok},         {"mode", to_string(c.mode)}, {"t_default", c.t_default},
                       {"min_scale", c.min_scale}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.w_inp = j.value("w_inp", d.w_inp);
    c.h_inp = j.value("h_inp", d.h_inp);
    c.patch = j.value("patch", d.patch);
    c.d_model = j.value("d_model", d.d_model);
    c.depth = j.value("depth", d.depth);
    c.heads = j.value("heads", d.heads);
    c.decoder_depth = j.value("decoder_depth", d.decoder_depth);
    c.viewer_layers = j.value("viewer_layers", d.viewer_layers);
    c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    c.T = j.value("T", d.T);
    c.K = j.value("K", d.K);
    c.n_tok = j.value("n_tok", d.n_tok);
    c.mode = parse_mode(j.value("mode", std::string("population")));
    c.t_default = j.value("t_default", d.t_default);
    c.min_scale = j.value("min_scale", d.min_scale);
    c.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------------------
// Squash maps between pre-squash z and fixations

using Vec3 = std::array<double, 3>;

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;

// x, y = sigmoid(z); t = exp(z).
inline Fixation squash(const Vec3& z) {
    return {ad::detail::sigmoid(z[0]), ad::detail::sigmoid(z[1]), std::exp(z[2])};
}

// Inverse of `squash`, with coordinates clamped to [eps, 1 - eps] so that
// boundary fixations stay finite.
inline Vec3 unsquash(const Fixation& f, double eps = 1e-6) {
    const double x = std::clamp(f.x, eps, 1.0 - eps), y = std::clamp(f.y, eps, 1.0 - eps);
    return {std::log(x) - std::log1p(-x), std::log(y) - std::log1p(-y), std::log(f.t)};
}

// log |d squash / dz|, summed over the three dimensions.
inline double squash_log_jacobian(const Vec3& z) {
    using ad::detail::log_sigmoid;
    return log_sigmoid(z[0]) + log_sigmoid(-z[0]) + log_sigmoid(z[1]) + log_sigmoid(-z[1]) + z[2];
}

inline double gaussian_log_density(double z, double mean, double scale) {
    const double u = (z - mean) / scale;
    return -0.5 * u * u - std::log(scale) - kLogSqrt2Pi;
}

// Per-step action distribution: mixture weights on the simplex, per-component
// means and diagonal standard deviations in pre-squash space.
struct StepPolicy {
    std::vector<double> weights;
    std::vector<Vec3> means;
    std::vector<Vec3> scales;

    std::size_t components() const { return weights.size(); }

    double component_log_density(std::size_t k, const Vec3& z) const {
        double s = 0.0;
        for (int d = 0; d < 3; ++d) s += gaussian_log_density(z[d], means[k][d], scales[k][d]);
        return s;
    }

    double log_density(const Vec3& z) const {
        double m = -std::numeric_limits<double>::infinity();
        std::vector<double> terms(components());
        for (std::size_t k = 0; k < components(); ++k) {
            terms[k] = std::log(weights[k]) + component_log_density(k, z);
            m = std::max(m, terms[k]);
        }
        double acc = 0.0;
        for (double v : terms) acc += std::exp(v - m);
        return m + std::log(acc);
    }

    std::size_t dominant() const {
        return static_cast<std::size_t>(std::max_element(weights.begin(), weights.end()) - weights.begin());
    }
};

// Seeded sampler with explicit uniform/normal transforms so streams are
// identical across standard library implementations.
class Sampler {
public:
    explicit Sampler(std::uint64_t seed) : rng_(seed) {}

    double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.28318530717958647692;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    Vec3 sample(const StepPolicy& p) {
        const double u = uniform();
        std::size_t k = 0;
        double c = p.weights[0];
        while (u >= c && k + 1 < p.components()) c += p.weights[++k];
        Vec3 z;
        for (int d = 0; d < 3; ++d) z[d] = p.means[k][d] + p.scales[k][d] * normal();
        return z;
    }

    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

struct RolloutStep {
    Vec3 z{};                  // pre-squash action
    StepPolicy policy;
    double log_density = 0.0;  // mixture log density of z
    double log_jacobian = 0.0; // log |d squash / dz|
};

struct RolloutResult {
    Scanpath path;
    double log_prob = 0.0;     // sum over steps 2..T of log_density - log_jacobian
    std::vector<RolloutStep> steps;
};

// Decoder head outputs for L steps.
struct HeadOutputs {
    Var logits;  // L x K
    Var means;   // L x 3K, component-major
    Var scales;  // L x 3K, positive
};

// ---------------------------------------------------------------------------

class PolicyModel {
public:
    explicit PolicyModel(ModelConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        init_parameters();
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    Mode mode() const noexcept { return cfg_.mode; }

    ad::ParameterSet& params() noexcept { return params_; }
    const ad::ParameterSet& params() const noexcept { return params_; }

    // -- viewer embeddings --------------------------------------------------

    bool has_viewer(const std::string& id) const { return viewers_.count(id) != 0; }
    std::vector<std::string> viewer_ids() const {
        std::vector<std::string> ids;
        for (const auto& [id, _] : viewers_) ids.push_back(id);
        return ids;
    }

    ad::Parameter& viewer(const std::string& id) {
        auto it = viewers_.find(id);
        if (it == viewers_.end()) throw ValidationError("unknown viewer '" + id + "'", "viewer");
        return it->second;
    }
    const ad::Parameter& viewer(const std::string& id) const {
        auto it = viewers_.find(id);
        if (it == viewers_.end()) throw ValidationError("unknown viewer '" + id + "'", "viewer");
        return it->second;
    }

    std::map<std::string, ad::Parameter>& viewers() noexcept { return viewers_; }
    const std::map<std::string, ad::Parameter>& viewers() const noexcept { return viewers_; }

    // Registers a viewer with the given tokens, or with small random tokens
    // drawn from a stream derived from the model seed and the id.
    ad::Parameter& add_viewer(const std::string& id, std::optional<Matrix> tokens = std::nullopt) {
        if (cfg_.mode != Mode::Individual)
            throw ValidationError("viewer embeddings require an individual-mode model", "viewer");
        Matrix m;
        if (tokens) {
            m = *tokens;
            if (m.rows() != cfg_.n_tok || m.cols() != cfg_.d_model)
                throw ValidationError("viewer embedding shape mismatch", "viewer");
        } else {
            std::uint64_t h = cfg_.seed ^ 0x9e3779b97f4a7c15ULL;
            for (char c : id) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
            Sampler s(h);
            m.resize(cfg_.n_tok, cfg_.d_model);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.5 * s.normal();
        }
        auto [it, inserted] = viewers_.insert_or_assign(id, ad::Parameter{std::move(m), Matrix(), false});
        it->second.zero_grad();
        return it->second;
    }

    void remove_viewer(const std::string& id) { viewers_.erase(id); }

    // Resolves the viewer argument against the model mode.
    const ad::Parameter* viewer_for(const std::optional<std::string>& viewer_id) const {
        if (cfg_.mode == Mode::Population) {
            if (viewer_id) throw ValidationError("population model does not take a viewer", "viewer");
            return nullptr;
        }
        if (!viewer_id) throw ValidationError("individual model needs a viewer", "viewer");
        return &viewer(*viewer_id);
    }

    // -- forward pieces -----------------------------------------------------

    // Resized image split into non-overlapping patches: n_I x (patch*patch*3),
    // patches in row-major grid order, pixels centred on 0.
    Matrix patchify(const StimulusImage& image) const {
        const auto rgb = resize_rgb(image, cfg_.w_inp, cfg_.h_inp);
        const int p = cfg_.patch, gw = cfg_.w_inp / p, gh = cfg_.h_inp / p;
        Matrix out(gw * gh, cfg_.patch_dim());
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                const int row = gy * gw + gx;
                int col = 0;
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        for (int c = 0; c < 3; ++c)
                            out(row, col++) =
                                rgb[(static_cast<std::size_t>(gy * p + py) * cfg_.w_inp + gx * p + px) * 3 + c] - 0.5;
            }
        return out;
    }

    // Image embedding sequence, (n_I + 1) x d, CLS first.
    Var encode_patches(Tape& t, const Matrix& patches) const {
        if (patches.rows() != cfg_.patches() || patches.cols() != cfg_.patch_dim())
            throw ValidationError("patch matrix shape does not match the encoder config", "patches");
        Var x = ad::linear(t.constant(patches), P(t, "enc/patch_w"), P(t, "enc/patch_b"));
        x = ad::concat_rows({P(t, "enc/cls"), x});
        x = ad::add(x, P(t, "enc/pos"));
        for (int l = 0; l < cfg_.depth; ++l) {
            const std::string pre = "enc/L" + std::to_string(l) + "/";
            Var h = ln(t, pre + "ln1", x);
            x = ad::add(x, attention(t, pre + "attn/", h, h, nullptr));
            x = ad::add(x, mlp(t, pre + "mlp/", ln(t, pre + "ln2", x)));
        }
        return ln(t, "enc/ln_f", x);
    }

    Var encode_image(Tape& t, const StimulusImage& image) const { return encode_patches(t, patchify(image)); }

    // Cross-attention from the image sequence (queries) to the viewer tokens
    // (keys/values). Population mode passes the sequence through unchanged.
    Var encode_viewer(Tape& t, Var image_emb, const ad::Parameter* viewer) const {
        if (!viewer) return image_emb;
        if (viewer->value.rows() != cfg_.n_tok || viewer->value.cols() != cfg_.d_model)
            throw ValidationError("viewer embedding shape mismatch", "viewer");
        Var e = t.param(*viewer);
        Var x = image_emb;
        for (int l = 0; l < cfg_.viewer_layers; ++l) {
            const std::string pre = "viewer/L" + std::to_string(l) + "/";
            x = ad::add(x, attention(t, pre + "attn/", ln(t, pre + "ln1", x), e, nullptr));
            x = ad::add(x, mlp(t, pre + "mlp/", ln(t, pre + "ln2", x)));
        }
        return x;
    }

    Var context(Tape& t, const Matrix& patches, const ad::Parameter* viewer) const {
        return encode_viewer(t, encode_patches(t, patches), viewer);
    }

    // Decoder token features for fixations 1..L (rows: x, y, t).
    static Matrix token_features(std::span<const Fixation> fixations) {
        Matrix m(static_cast<Eigen::Index>(fixations.size()), 3);
        for (std::size_t i = 0; i < fixations.size(); ++i) {
            m(static_cast<Eigen::Index>(i), 0) = fixations[i].x;
            m(static_cast<Eigen::Index>(i), 1) = fixations[i].y;
            m(static_cast<Eigen::Index>(i), 2) = fixations[i].t;
        }
        return m;
    }

    // Causal decoder over the fixation prefix; row j of the output
    // parameterizes fixation j + 2.
    Var decode(Tape& t, Var ctx, const Matrix& tokens) const {
        const Eigen::Index L = tokens.rows();
        if (L < 1 || L > cfg_.T - 1) throw ValidationError("decoder prefix length out of range", "T");
        if (ctx.rows() < 1) throw ValidationError("empty decoder context", "context");
        Var h = ad::linear(t.constant(tokens), P(t, "dec/in_w"), P(t, "dec/in_b"));
        h = ad::add(h, ad::slice_rows(P(t, "dec/pos"), 0, L));
        Matrix mask = Matrix::Zero(L, L);
        for (Eigen::Index i = 0; i < L; ++i)
            for (Eigen::Index j = i + 1; j < L; ++j) mask(i, j) = -std::numeric_limits<double>::infinity();
        for (int l = 0; l < cfg_.decoder_depth; ++l) {
            const std::string pre = "dec/L" + std::to_string(l) + "/";
            Var a = ln(t, pre + "ln1", h);
            h = ad::add(h, attention(t, pre + "self/", a, a, &mask));
            h = ad::add(h, attention(t, pre + "cross/", ln(t, pre + "ln2", h), ctx, nullptr));
            h = ad::add(h, mlp(t, pre + "mlp/", ln(t, pre + "ln3", h)));
        }
        return ln(t, "dec/ln_f", h);
    }

    HeadOutputs heads(Tape& t, Var hidden) const {
        HeadOutputs o;
        o.logits = ad::linear(hidden, P(t, "head/w_logits"), P(t, "head/b_logits"));
        o.means = ad::linear(hidden, P(t, "head/w_mean"), P(t, "head/b_mean"));
        o.scales = ad::add_scalar(ad::softplus(ad::linear(hidden, P(t, "head/w_scale"), P(t, "head/b_scale"))),
                                  cfg_.min_scale);
        return o;
    }

    StepPolicy step_policy(const HeadOutputs& h, Eigen::Index row) const {
        StepPolicy p;
        const auto& lg = h.logits.value();
        const double m = lg.row(row).maxCoeff();
        double z = 0.0;
        for (int k = 0; k < cfg_.K; ++k) z += std::exp(lg(row, k) - m);
        for (int k = 0; k < cfg_.K; ++k) {
            p.weights.push_back(std::exp(lg(row, k) - m) / z);
            Vec3 mu, sd;
            for (int d = 0; d < 3; ++d) {
                mu[d] = h.means.value()(row, 3 * k + d);
                sd[d] = h.scales.value()(row, 3 * k + d);
            }
            p.means.push_back(mu);
            p.scales.push_back(sd);
        }
        return p;
    }

    // Sum over rows of the mixture log density of `z` (L x 3) under the head
    // outputs, differentiable.
    Var mixture_log_density(Tape& t, const HeadOutputs& h, const Matrix& z) const {
        const Eigen::Index L = z.rows();
        const int K = cfg_.K;
        Matrix zrep(L, 3 * K);
        for (Eigen::Index r = 0; r < L; ++r)
            for (int k = 0; k < K; ++k) zrep.block(r, 3 * k, 1, 3) = z.row(r);
        Var u = ad::cdiv(ad::sub(t.constant(std::move(zrep)), h.means), h.scales);
        Var per_dim = ad::sub(ad::scale(ad::square(u), -0.5), ad::log(h.scales));
        Var comp = ad::reshape(ad::row_sum(ad::reshape(per_dim, L * K, 3)), L, K);
        comp = ad::add_scalar(comp, -3.0 * kLogSqrt2Pi);
        Var joint = ad::add(comp, ad::log_softmax_rows(h.logits));
        return ad::sum(ad::logsumexp_rows(joint));
    }

    // Fixation 1 of every scanpath: screen centre with the default duration.
    Fixation first_fixation() const { return {0.5, 0.5, cfg_.t_default}; }

    // Exact log-density of fixations 2..T given the pre-squash actions `z`
    // ((T-1) x 3) and the squashed prefix used as decoder input.
    Var sequence_log_prob(Tape& t, Var ctx, std::span<const Fixation> fixations, const Matrix& z) const {
        const auto T = static_cast<std::size_t>(cfg_.T);
        if (fixations.size() != T) throw ValidationError("scanpath length does not match model T", "T");
        std::vector<Fixation> prefix(fixations.begin(), fixations.end() - 1);
        prefix[0] = first_fixation();
        const HeadOutputs h = heads(t, decode(t, ctx, token_features(prefix)));
        double jac = 0.0;
        for (Eigen::Index r = 0; r < z.rows(); ++r) jac += squash_log_jacobian({z(r, 0), z(r, 1), z(r, 2)});
        return ad::add_scalar(mixture_log_density(t, h, z), -jac);
    }

    static Matrix pre_squash_matrix(std::span<const Fixation> fixations) {
        Matrix z(static_cast<Eigen::Index>(fixations.size()) - 1, 3);
        for (std::size_t i = 1; i < fixations.size(); ++i) {
            const Vec3 v = unsquash(fixations[i]);
            for (int d = 0; d < 3; ++d) z(static_cast<Eigen::Index>(i - 1), d) = v[d];
        }
        return z;
    }

    // -- public inference ---------------------------------------------------

    // Autoregressive generation. Greedy mode takes the mean of the
    // highest-weight component at every step.
    RolloutResult rollout(const StimulusImage& image, const std::optional<std::string>& viewer_id,
                          RolloutMode mode, std::uint64_t seed) const {
        return rollout_patches(patchify(image), image.id, viewer_id, mode, seed);
    }

    RolloutResult rollout_patches(const Matrix& patches, const std::string& stimulus_id,
                                  const std::optional<std::string>& viewer_id, RolloutMode mode,
                                  std::uint64_t seed) const {
        const ad::Parameter* viewer = viewer_for(viewer_id);
        Tape t(false);
        Var ctx = context(t, patches, viewer);
        return rollout_context(t, ctx, stimulus_id, viewer_id, mode, seed);
    }

    // Generation from an already encoded context (lets callers share one
    // encoder pass between several rollouts).
    RolloutResult rollout_context(Tape& t, Var ctx, const std::string& stimulus_id,
                                  const std::optional<std::string>& viewer_id, RolloutMode mode,
                                  std::uint64_t seed) const {
        Sampler sampler(seed);
        RolloutResult r;
        r.path.stimulus_id = stimulus_id;
        r.path.viewer_id = viewer_id;
        r.path.fixations.push_back(first_fixation());
        for (int i = 1; i < cfg_.T; ++i) {
            const HeadOutputs h = heads(t, decode(t, ctx, token_features(r.path.fixations)));
            RolloutStep step;
            step.policy = step_policy(h, i - 1);
            step.z = mode == RolloutMode::Greedy ? step.policy.means[step.policy.dominant()] : sampler.sample(step.policy);
            step.log_density = step.policy.log_density(step.z);
            step.log_jacobian = squash_log_jacobian(step.z);
            r.log_prob += step.log_density - step.log_jacobian;
            r.path.fixations.push_back(squash(step.z));
            r.steps.push_back(std::move(step));
        }
        return r;
    }

    static Matrix step_actions(const RolloutResult& r) {
        Matrix z(static_cast<Eigen::Index>(r.steps.size()), 3);
        for (std::size_t i = 0; i < r.steps.size(); ++i)
            for (int d = 0; d < 3; ++d) z(static_cast<Eigen::Index>(i), d) = r.steps[i].z[d];
        return z;
    }

    // Log-probability of a length-T scanpath; its first fixation is ignored.
    double log_prob(const Scanpath& path, const StimulusImage& image,
                    const std::optional<std::string>& viewer_id) const {
        const ad::Parameter* viewer = viewer_for(viewer_id);
        Tape t(false);
        Var ctx = context(t, patchify(image), viewer);
        return sequence_log_prob(t, ctx, path.fixations, pre_squash_matrix(path.fixations)).scalar();
    }

    // Step policy for the step following `prefix` (deterministic forward).
    StepPolicy next_step_policy(const StimulusImage& image, const std::optional<std::string>& viewer_id,
                                std::span<const Fixation> prefix) const {
        const ad::Parameter* viewer = viewer_for(viewer_id);
        Tape t(false);
        Var ctx = context(t, patchify(image), viewer);
        std::vector<Fixation> pre(prefix.begin(), prefix.end());
        if (pre.empty()) throw ValidationError("prefix must contain the first fixation", "fixations");
        pre[0] = first_fixation();
        const HeadOutputs h = heads(t, decode(t, ctx, token_features(pre)));
        return step_policy(h, static_cast<Eigen::Index>(pre.size()) - 1);
    }

    // Every step's policy under teacher forcing on `path` (steps 2..T).
    std::vector<StepPolicy> teacher_forced_policies(const Scanpath& path, const StimulusImage& image,
                                                    const std::optional<std::string>& viewer_id) const {
        const ad::Parameter* viewer = viewer_for(viewer_id);
        Tape t(false);
        Var ctx = context(t, patchify(image), viewer);
        std::vector<Fixation> prefix(path.fixations.begin(), path.fixations.end() - 1);
        prefix[0] = first_fixation();
        const HeadOutputs h = heads(t, decode(t, ctx, token_features(prefix)));
        std::vector<StepPolicy> out;
        for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(prefix.size()); ++r) out.push_back(step_policy(h, r));
        return out;
    }

    void set_t_default(double t) {
        if (!(t > 0)) throw ValidationError("t_default must be positive", "t_default");
        cfg_.t_default = t;
    }

    // Non-viewer parameter names (everything the freezing contract covers).
    std::vector<std::string> parameter_names() const {
        std::vector<std::string> names;
        for (const auto& [n, _] : params_) names.push_back(n);
        return names;
    }

private:
    Var P(Tape& t, const std::string& name) const { return t.param(params_[name]); }

    Var ln(Tape& t, const std::string& pre, Var x) const {
        return ad::layer_norm(x, P(t, pre + "_g"), P(t, pre + "_b"));
    }

    Var mlp(Tape& t, const std::string& pre, Var x) const {
        return ad::linear(ad::gelu(ad::linear(x, P(t, pre + "w1"), P(t, pre + "b1"))), P(t, pre + "w2"),
                          P(t, pre + "b2"));
    }

    Var attention(Tape& t, const std::string& pre, Var q_in, Var kv_in, const Matrix* mask) const {
        const int H = cfg_.heads, dh = cfg_.d_model / H;
        Var q = ad::linear(q_in, P(t, pre + "wq"), P(t, pre + "bq"));
        Var k = ad::linear(kv_in, P(t, pre + "wk"), P(t, pre + "bk"));
        Var v = ad::linear(kv_in, P(t, pre + "wv"), P(t, pre + "bv"));
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Var> outs;
        for (int h = 0; h < H; ++h) {
            Var s = ad::scale(ad::matmul_nt(ad::slice_cols(q, h * dh, dh), ad::slice_cols(k, h * dh, dh)), scale);
            if (mask) s = ad::add(s, t.constant(*mask));
            outs.push_back(ad::matmul(ad::softmax_rows(s), ad::slice_cols(v, h * dh, dh)));
        }
        Var o = H == 1 ? outs.front() : ad::concat_cols(outs);
        return ad::linear(o, P(t, pre + "wo"), P(t, pre + "bo"));
    }

    void init_parameters() {
        Sampler s(cfg_.seed);
        const int d = cfg_.d_model, hid = cfg_.d_model * cfg_.mlp_ratio, K = cfg_.K;
        auto normal = [&](int r, int c, double sd) {
            Matrix m(r, c);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * s.normal();
            return m;
        };
        auto xavier = [&](int in, int out) { return normal(in, out, std::sqrt(2.0 / (in + out))); };
        auto zeros = [](int r, int c) { return Matrix(Matrix::Zero(r, c)); };
        auto ones = [](int r, int c) { return Matrix(Matrix::Ones(r, c)); };
        auto add_ln = [&](const std::string& pre) {
            params_.add(pre + "_g", ones(1, d));
            params_.add(pre + "_b", zeros(1, d));
        };
        auto add_attn = [&](const std::string& pre) {
            for (const char* n : {"q", "k", "v"}) {
                params_.add(pre + "w" + n, xavier(d, d));
                params_.add(pre + "b" + n, zeros(1, d));
            }
            params_.add(pre + "wo", normal(d, d, 0.5 * std::sqrt(1.0 / d)));
            params_.add(pre + "bo", zeros(1, d));
        };
        auto add_mlp = [&](const std::string& pre) {
            params_.add(pre + "w1", xavier(d, hid));
            params_.add(pre + "b1", zeros(1, hid));
            params_.add(pre + "w2", normal(hid, d, 0.5 * std::sqrt(1.0 / hid)));
            params_.add(pre + "b2", zeros(1, d));
        };

        params_.add("enc/patch_w", xavier(cfg_.patch_dim(), d));
        params_.add("enc/patch_b", zeros(1, d));
        params_.add("enc/cls", normal(1, d, 0.02));
        params_.add("enc/pos", normal(cfg_.patches() + 1, d, 0.02));
        for (int l = 0; l < cfg_.depth; ++l) {
            const std::string pre = "enc/L" + std::to_string(l) + "/";
            add_ln(pre + "ln1");
            add_attn(pre + "attn/");
            add_ln(pre + "ln2");
            add_mlp(pre + "mlp/");
        }
        add_ln("enc/ln_f");

        for (int l = 0; l < cfg_.viewer_layers; ++l) {
            const std::string pre = "viewer/L" + std::to_string(l) + "/";
            add_ln(pre + "ln1");
            add_attn(pre + "attn/");
            add_ln(pre + "ln2");
            add_mlp(pre + "mlp/");
        }

        params_.add("dec/in_w", xavier(3, d));
        params_.add("dec/in_b", zeros(1, d));
        params_.add("dec/pos", normal(cfg_.T - 1, d, 0.02));
        for (int l = 0; l < cfg_.decoder_depth; ++l) {
            const std::string pre = "dec/L" + std::to_string(l) + "/";
            add_ln(pre + "ln1");
            add_attn(pre + "self/");
            add_ln(pre + "ln2");
            add_attn(pre + "cross/");
            add_ln(pre + "ln3");
            add_mlp(pre + "mlp/");
        }
        add_ln("dec/ln_f");

        params_.add("head/w_logits", normal(d, K, 0.01));
        params_.add("head/b_logits", zeros(1, K));
        params_.add("head/w_mean", normal(d, 3 * K, 0.05));
        Matrix b_mean(1, 3 * K);
        for (int k = 0; k < K; ++k) {
            b_mean(0, 3 * k + 0) = K == 1 ? 0.0 : 0.3 * s.normal();
            b_mean(0, 3 * k + 1) = K == 1 ? 0.0 : 0.3 * s.normal();
            b_mean(0, 3 * k + 2) = std::log(cfg_.t_default);
        }
        params_.add("head/b_mean", std::move(b_mean));
        params_.add("head/w_scale", normal(d, 3 * K, 0.01));
        // softplus^-1(0.5): initial spread of 0.5 in every pre-squash dimension
        params_.add("head/b_scale", Matrix(Matrix::Constant(1, 3 * K, std::log(std::expm1(0.5)))));
    }

    ModelConfig cfg_;
    ad::ParameterSet params_;
    std::map<std::string, ad::Parameter> viewers_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "EYFM", u32 version, u32 header length, JSON header, then
// named blocks (u32 name length, name, u32 rows, u32 cols, f32 LE data).

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint truncated");
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline void write_block(std::ostream& out, const std::string& name, const Matrix& m) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(m.rows()));
    write_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        const float f = static_cast<float>(m.data()[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        write_u32(out, bits);
    }
}

} // namespace detail

struct CheckpointInfo {
    std::string config_text;  // training config file, verbatim
    nlohmann::json extra = nlohmann::json::object();
};

inline void save_checkpoint(const PolicyModel& model, const fs::path& path, const CheckpointInfo& info = {}) {
    nlohmann::json header;
    header["format"] = "EYFM";
    header["version"] = kCheckpointVersion;
    header["model"] = model.config();
    header["config_text"] = info.config_text;
    header["extra"] = info.extra;
    header["viewers"] = model.viewer_ids();
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& [name, p] : model.params()) blocks.push_back({name, p.value.rows(), p.value.cols()});
    header["blocks"] = blocks;
    const std::string hs = header.dump();

    std::ostringstream buf(std::ios::binary);
    buf.write("EYFM", 4);
    detail::write_u32(buf, kCheckpointVersion);
    detail::write_u32(buf, static_cast<std::uint32_t>(hs.size()));
    buf.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, p] : model.params()) detail::write_block(buf, name, p.value);
    for (const auto& [id, p] : model.viewers()) detail::write_block(buf, "viewer_emb/" + id, p.value);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    const std::string bytes = buf.str();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint " + path.string());
}

struct LoadedCheckpoint {
    PolicyModel model;
    CheckpointInfo info;
};

// Loads and validates a checkpoint. `requested_mode`, when given, must be
// satisfiable: individual mode requires stored viewer embeddings.
inline LoadedCheckpoint load_checkpoint_full(const fs::path& path, std::optional<Mode> requested_mode = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "EYFM", 4) != 0) throw FormatError("not a checkpoint file (bad magic)");
    const auto version = detail::read_u32(in);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint version " + std::to_string(version) + " not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    const auto hlen = detail::read_u32(in);
    if (hlen > (1u << 26)) throw FormatError("checkpoint header too large");
    std::string hs(hlen, '\0');
    if (!in.read(hs.data(), hlen)) throw FormatError("checkpoint truncated in header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
    }
    ModelConfig cfg;
    try {
        cfg = header.at("model").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt checkpoint config: ") + e.what());
    }
    PolicyModel model(cfg);
    std::set<std::string> seen;
    const auto n_viewers = header.value("viewers", nlohmann::json::array()).size();
    const std::size_t n_blocks = model.params().size() + n_viewers;
    for (std::size_t b = 0; b < n_blocks; ++b) {
        const auto nlen = detail::read_u32(in);
        if (nlen > 4096) throw FormatError("corrupt checkpoint block name");
        std::string name(nlen, '\0');
        if (!in.read(name.data(), nlen)) throw FormatError("checkpoint truncated in block name");
        const auto rows = detail::read_u32(in), cols = detail::read_u32(in);
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const std::uint32_t bits = detail::read_u32(in);
            float f;
            std::memcpy(&f, &bits, 4);
            m.data()[i] = f;
        }
        if (!seen.insert(name).second) throw FormatError("duplicate checkpoint block '" + name + "'");
        if (name.rfind("viewer_emb/", 0) == 0) {
            if (cfg.mode != Mode::Individual) throw FormatError("viewer embedding in a population checkpoint");
            if (m.rows() != cfg.n_tok || m.cols() != cfg.d_model)
                throw ValidationError("viewer embedding '" + name + "' has shape " + std::to_string(rows) + "x" +
                                          std::to_string(cols) + ", config expects " + std::to_string(cfg.n_tok) +
                                          "x" + std::to_string(cfg.d_model),
                                      "d_model");
            model.add_viewer(name.substr(11), std::move(m));
            continue;
        }
        if (!model.params().contains(name)) throw FormatError("unexpected checkpoint block '" + name + "'");
        auto& p = model.params()[name];
        if (p.value.rows() != m.rows() || p.value.cols() != m.cols())
            throw ValidationError("block '" + name + "' has shape " + std::to_string(rows) + "x" +
                                      std::to_string(cols) + ", config expects " + std::to_string(p.value.rows()) +
                                      "x" + std::to_string(p.value.cols()),
                                  "d_model");
        p.value = std::move(m);
    }
    if (in.peek() != EOF) throw FormatError("trailing bytes after checkpoint blocks");
    if (requested_mode && *requested_mode != cfg.mode) {
        if (*requested_mode == Mode::Individual)
            throw ValidationError("checkpoint is population-level and has no viewer embeddings", "mode");
        throw ValidationError("checkpoint is individual-level; population predictions need a population checkpoint",
                              "mode");
    }
    if (requested_mode == Mode::Individual && model.viewers().empty())
        throw ValidationError("checkpoint has no viewer embeddings", "mode");
    CheckpointInfo info;
    info.config_text = header.value("config_text", std::string());
    info.extra = header.value("extra", nlohmann::json::object());
    return {std::move(model), std::move(info)};
}

inline PolicyModel load_checkpoint(const fs::path& path, std::optional<Mode> requested_mode = std::nullopt) {
    return std::move(load_checkpoint_full(path, requested_mode).model);
}

} // namespace scanflow
