#pragma once

// Supervised warm-up, REINFORCE with a stop-gradient greedy baseline, the
// training loop, and per-viewer personalization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "scanflow/metrics.hpp"
#include "scanflow/model.hpp"
#include "scanflow/reward.hpp"

namespace scanflow {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 5.0;  // global gradient-norm clip; <= 0 disables
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const noexcept { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    // Global L2 norm of the gradients of `params`.
    static double grad_norm(const std::vector<ad::Parameter*>& params) {
        double s = 0.0;
        for (const auto* p : params)
            if (p->grad.size()) s += p->grad.squaredNorm();
        return std::sqrt(s);
    }

    // Clips, then applies one update. Returns the pre-clip gradient norm.
    double step(const std::vector<ad::Parameter*>& params) {
        const double norm = grad_norm(params);
        if (!std::isfinite(norm)) throw Error("non-finite gradient");
        const double scale = cfg_.clip_norm > 0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, t_), c2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (auto* p : params) {
            if (p->frozen || p->grad.size() == 0) continue;
            auto& st = state_[p];
            if (st.m.size() == 0) {
                st.m.setZero(p->value.rows(), p->value.cols());
                st.v.setZero(p->value.rows(), p->value.cols());
            }
            const Matrix g = p->grad * scale;
            st.m = cfg_.beta1 * st.m + (1.0 - cfg_.beta1) * g;
            st.v = cfg_.beta2 * st.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
            p->value.array() -= cfg_.lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + cfg_.eps);
        }
        return norm;
    }

private:
    struct State {
        Matrix m, v;
    };
    AdamConfig cfg_;
    long t_ = 0;
    std::map<const ad::Parameter*, State> state_;
};

inline void zero_grads(const std::vector<ad::Parameter*>& params) {
    for (auto* p : params) p->zero_grad();
}

// Every non-frozen tensor of the model, viewer embeddings included.
inline std::vector<ad::Parameter*> trainable(PolicyModel& model, bool include_viewers = true) {
    std::vector<ad::Parameter*> out;
    for (auto& [_, p] : model.params())
        if (!p.frozen) out.push_back(&p);
    if (include_viewers)
        for (auto& [_, p] : model.viewers())
            if (!p.frozen) out.push_back(&p);
    return out;
}

// ---------------------------------------------------------------------------

// One training item: the resized image patches, the ground-truth scanpath
// (exactly T fixations), and the stimulus reward environment.
struct Example {
    std::shared_ptr<const Matrix> patches;
    Scanpath truth;
    std::optional<std::string> viewer;
    std::shared_ptr<const StimulusEnv> env;
};

struct TrainConfig {
    fs::path dataset;
    fs::path out_dir;
    ModelConfig model;
    // 1920x1080 desktop at 60 cm, 37.8 px/cm; 2 degrees gives m_display ~ 79 px.
    DisplayConfig display = DisplayConfig::from_viewing_geometry(1920, 1080, 60.0, 37.8);
    fs::path saliency_dir;        // empty: empirical saliency from training viewers
    double saliency_sigma_deg = 1.0;
    AdamConfig optimizer;
    int batch_size = 8;
    int epochs = 10;
    int warmup_epochs = 2;        // supervised epochs before REINFORCE
    bool use_rl = true;
    RewardFlags reward;
    int baseline_samples = 1;     // greedy rollouts averaged into the baseline
    int eval_every = 1;           // epochs between validation passes
    int max_eval_images = 0;      // 0: all held-out images
    std::uint64_t seed = 0;
    std::string config_text;      // config file contents, echoed into checkpoints

    void validate() const {
        model.validate();
        display.validate();
        if (batch_size < 1) throw ValidationError("batch_size must be >= 1", "batch_size");
        if (epochs < 0) throw ValidationError("epochs must be >= 0", "epochs");
        if (warmup_epochs < 0) throw ValidationError("warmup_epochs must be >= 0", "warmup_epochs");
        if (!(optimizer.lr > 0)) throw ValidationError("learning rate must be positive", "lr");
        if (baseline_samples < 1) throw ValidationError("baseline_samples must be >= 1", "baseline_samples");
        if (eval_every < 1) throw ValidationError("eval_every must be >= 1", "eval_every");
        if (use_rl && !reward.use_r_sal && !reward.use_r_dtwd)
            throw ValidationError("RL training needs at least one reward term", "reward");
    }
};

// Parses the JSON training config. Unknown keys are rejected so typos
// surface as errors naming the field.
inline TrainConfig parse_train_config(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "dataset", "out_dir", "model", "display", "saliency_dir", "saliency_sigma_deg", "lr", "beta1", "beta2",
        "eps", "clip_norm", "batch_size", "epochs", "warmup_epochs", "use_rl", "use_r_sal", "use_r_dtwd",
        "use_ior", "w_sal", "w_dtwd", "baseline_samples", "eval_every", "max_eval_images", "seed"};
    if (!j.is_object()) throw ValidationError("config must be a JSON object", "config");
    for (const auto& [k, _] : j.items())
        if (!known.count(k)) throw ValidationError("unknown config key '" + k + "'", k);
    TrainConfig c;
    try {
        if (!j.contains("dataset")) throw ValidationError("missing required field 'dataset'", "dataset");
        c.dataset = j.at("dataset").get<std::string>();
        c.out_dir = j.value("out_dir", std::string("runs/default"));
        if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
        if (j.contains("display")) c.display = j.at("display").get<DisplayConfig>();
        c.saliency_dir = j.value("saliency_dir", std::string());
        c.saliency_sigma_deg = j.value("saliency_sigma_deg", c.saliency_sigma_deg);
        c.optimizer.lr = j.value("lr", c.optimizer.lr);
        c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
        c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
        c.optimizer.eps = j.value("eps", c.optimizer.eps);
        c.optimizer.clip_norm = j.value("clip_norm", c.optimizer.clip_norm);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
        c.use_rl = j.value("use_rl", c.use_rl);
        c.reward.use_r_sal = j.value("use_r_sal", c.reward.use_r_sal);
        c.reward.use_r_dtwd = j.value("use_r_dtwd", c.reward.use_r_dtwd);
        c.reward.use_ior = j.value("use_ior", c.reward.use_ior);
        c.reward.w_sal = j.value("w_sal", c.reward.w_sal);
        c.reward.w_dtwd = j.value("w_dtwd", c.reward.w_dtwd);
        c.baseline_samples = j.value("baseline_samples", c.baseline_samples);
        c.eval_every = j.value("eval_every", c.eval_every);
        c.max_eval_images = j.value("max_eval_images", c.max_eval_images);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::type_error& e) {
        throw ValidationError(std::string("config type error: ") + e.what(), "config");
    }
    c.validate();
    return c;
}

// Named ablation arms. Each one flips exactly one switch of the full model.
inline void apply_ablation(TrainConfig& c, const std::string& arm) {
    if (arm == "full" || arm.empty()) return;
    if (arm == "w/o-rl") c.use_rl = false;
    else if (arm == "w/o-r_sal") c.reward.use_r_sal = false;
    else if (arm == "w/o-r_dtwd") c.reward.use_r_dtwd = false;
    else if (arm == "w/o-ior") c.reward.use_ior = false;
    else throw ValidationError("unknown ablation '" + arm + "' (full, w/o-rl, w/o-r_sal, w/o-r_dtwd, w/o-ior)", "ablation");
}

// ---------------------------------------------------------------------------
// Losses and steps

// Teacher-forced negative log-likelihood of fixations 2..T for one example.
inline Var supervised_nll(Tape& t, const PolicyModel& model, const Example& ex) {
    if (ex.truth.size() != static_cast<std::size_t>(model.config().T))
        throw ValidationError("scanpath length does not match model T", "T");
    Var ctx = model.context(t, *ex.patches, model.viewer_for(ex.viewer));
    return ad::scale(model.sequence_log_prob(t, ctx, ex.truth.fixations,
                                             PolicyModel::pre_squash_matrix(ex.truth.fixations)),
                     -1.0);
}

// Summed NLL over the batch, differentiable.
inline Var supervised_loss(Tape& t, const PolicyModel& model, std::span<const Example> batch) {
    if (batch.empty()) throw ValidationError("empty batch", "batch");
    Var total = supervised_nll(t, model, batch[0]);
    for (std::size_t i = 1; i < batch.size(); ++i) total = ad::add(total, supervised_nll(t, model, batch[i]));
    return total;
}

struct SupervisedStats {
    double loss = 0.0;       // summed over the batch
    double grad_norm = 0.0;
};

// One optimizer step on the batch-mean NLL.
inline SupervisedStats supervised_step(PolicyModel& model, std::span<const Example> batch, Adam& opt,
                                       const std::vector<ad::Parameter*>& params) {
    zero_grads(params);
    Tape t;
    Var loss = supervised_loss(t, model, batch);
    if (!std::isfinite(loss.scalar())) throw Error("non-finite supervised loss");
    t.backward(loss, 1.0 / static_cast<double>(batch.size()));
    SupervisedStats s;
    s.loss = loss.scalar();
    s.grad_norm = opt.step(params);
    return s;
}

struct ReinforceStats {
    double reward = 0.0;     // mean sampled reward r(p̂)
    double baseline = 0.0;   // mean greedy reward r(sg[μ])
    double advantage = 0.0;  // reward - baseline
    double grad_norm = 0.0;
    double r_dtwd = 0.0;     // mean DTWD term of sampled rollouts
    double r_sal = 0.0;      // mean summed salient value of sampled rollouts
    std::size_t examples = 0;
};

struct ReinforceOptions {
    RewardFlags reward;
    bool use_baseline = true;
    int baseline_samples = 1;
};

// Per-example REINFORCE sample: the sampled rollout, its reward, and the
// baseline reward. Nothing here carries gradient.
struct ReinforceSample {
    RolloutResult sample;
    RewardBreakdown reward;
    double baseline = 0.0;
};

inline ReinforceSample reinforce_sample(const PolicyModel& model, const Example& ex, const ReinforceOptions& opt,
                                        std::uint64_t seed) {
    Tape t(false);
    Var ctx = model.context(t, *ex.patches, model.viewer_for(ex.viewer));
    ReinforceSample s;
    s.sample = model.rollout_context(t, ctx, ex.truth.stimulus_id, ex.viewer, RolloutMode::Sample, seed);
    s.reward = episode_reward(s.sample.path, ex.truth, ex.env->saliency, ex.env->geometry, opt.reward);
    if (opt.use_baseline) {
        // The greedy rollout is deterministic, so extra baseline samples only
        // matter for the sampled-mean reading; they use their own streams.
        const auto greedy = model.rollout_context(t, ctx, ex.truth.stimulus_id, ex.viewer, RolloutMode::Greedy, 0);
        double b = episode_reward(greedy.path, ex.truth, ex.env->saliency, ex.env->geometry, opt.reward).total;
        for (int k = 1; k < opt.baseline_samples; ++k) {
            const auto extra = model.rollout_context(t, ctx, ex.truth.stimulus_id, ex.viewer, RolloutMode::Sample,
                                                     seed ^ (0xa5a5a5a5ULL * static_cast<std::uint64_t>(k)));
            b += episode_reward(extra.path, ex.truth, ex.env->saliency, ex.env->geometry, opt.reward).total;
        }
        s.baseline = b / opt.baseline_samples;
    }
    return s;
}

// Accumulates -(r - b) * d log π(p̂) / dθ, scaled by `weight`, into the
// parameter gradients.
inline void accumulate_policy_gradient(const PolicyModel& model, const Example& ex, const ReinforceSample& s,
                                       double weight) {
    const double adv = s.reward.total - s.baseline;
    if (adv == 0.0) return;
    Tape t;
    Var ctx = model.context(t, *ex.patches, model.viewer_for(ex.viewer));
    Var lp = model.sequence_log_prob(t, ctx, s.sample.path.fixations, PolicyModel::step_actions(s.sample));
    t.backward(lp, -adv * weight);
}

inline ReinforceStats reinforce_step(PolicyModel& model, std::span<const Example> batch, Adam& opt,
                                     const std::vector<ad::Parameter*>& params, const ReinforceOptions& ropt,
                                     std::uint64_t seed) {
    if (batch.empty()) throw ValidationError("empty batch", "batch");
    zero_grads(params);
    ReinforceStats st;
    const double w = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto s = reinforce_sample(model, batch[i], ropt, seed * 1000003ULL + i);
        if (!std::isfinite(s.reward.total) || !std::isfinite(s.sample.log_prob))
            throw Error("non-finite reward or log-probability in REINFORCE step");
        accumulate_policy_gradient(model, batch[i], s, w);
        st.reward += s.reward.total * w;
        st.baseline += s.baseline * w;
        st.r_dtwd += s.reward.r_dtwd * w;
        st.r_sal += std::accumulate(s.reward.r_sal_steps.begin(), s.reward.r_sal_steps.end(), 0.0) * w;
    }
    st.advantage = st.reward - st.baseline;
    st.examples = batch.size();
    st.grad_norm = opt.step(params);
    return st;
}

// Single-example gradient estimate at fixed parameters, flattened over
// `params` in order. Used to study the estimator itself.
inline Eigen::VectorXd reinforce_gradient_estimate(PolicyModel& model, const Example& ex,
                                                   const std::vector<ad::Parameter*>& params,
                                                   const ReinforceOptions& ropt, std::uint64_t seed) {
    zero_grads(params);
    const auto s = reinforce_sample(model, ex, ropt, seed);
    accumulate_policy_gradient(model, ex, s, 1.0);
    Eigen::Index n = 0;
    for (const auto* p : params) n += p->value.size();
    Eigen::VectorXd g(n);
    Eigen::Index o = 0;
    for (const auto* p : params) {
        g.segment(o, p->grad.size()) = Eigen::Map<const Eigen::VectorXd>(p->grad.data(), p->grad.size());
        o += p->grad.size();
    }
    return g;
}

// ---------------------------------------------------------------------------
// Data preparation and evaluation

// Patches per stimulus, computed once.
class PatchCache {
public:
    explicit PatchCache(const PolicyModel& model) : model_(&model) {}

    std::shared_ptr<const Matrix> get(const StimulusImage& img) {
        auto it = cache_.find(img.id);
        if (it != cache_.end()) return it->second;
        auto m = std::make_shared<const Matrix>(model_->patchify(img));
        cache_.emplace(img.id, m);
        return m;
    }

private:
    const PolicyModel* model_;
    std::map<std::string, std::shared_ptr<const Matrix>> cache_;
};

// Training examples from `paths`: truncated to T, short paths dropped.
// Population models see no viewer id.
inline std::vector<Example> make_examples(const PolicyModel& model, const Dataset& ds,
                                          const std::vector<const Scanpath*>& paths, const SaliencyProvider* env,
                                          PatchCache& cache, std::size_t* dropped_short = nullptr) {
    std::vector<Example> out;
    std::map<std::string, std::shared_ptr<const StimulusEnv>> envs;
    std::size_t dropped = 0;
    for (const auto* p : paths) {
        auto tr = truncate_or_reject(*p, static_cast<std::size_t>(model.config().T));
        if (tr.short_path) {
            ++dropped;
            continue;
        }
        Example ex;
        ex.patches = cache.get(ds.stimulus(p->stimulus_id));
        ex.truth = std::move(tr.path);
        if (model.mode() == Mode::Individual) ex.viewer = p->viewer_id;
        if (env) {
            auto it = envs.find(p->stimulus_id);
            if (it == envs.end())
                it = envs.emplace(p->stimulus_id, std::make_shared<const StimulusEnv>(env->env(p->stimulus_id))).first;
            ex.env = it->second;
        }
        out.push_back(std::move(ex));
    }
    if (dropped_short) *dropped_short = dropped;
    return out;
}

// Greedy predictions on `images`: one per image in population mode, one per
// (image, known viewer with a ground truth on it) in individual mode.
inline std::vector<Scanpath> predict_images(const PolicyModel& model, const Dataset& ds,
                                            const std::vector<std::string>& images, PatchCache& cache) {
    std::vector<Scanpath> out;
    for (const auto& id : images) {
        const auto patches = cache.get(ds.stimulus(id));
        if (model.mode() == Mode::Population) {
            out.push_back(model.rollout_patches(*patches, id, std::nullopt, RolloutMode::Greedy, 0).path);
            continue;
        }
        std::set<std::string> seen;
        for (const auto* p : ds.paths_for(id))
            if (p->viewer_id && model.has_viewer(*p->viewer_id) && seen.insert(*p->viewer_id).second)
                out.push_back(model.rollout_patches(*patches, id, p->viewer_id, RolloutMode::Greedy, 0).path);
    }
    return out;
}

// Mean DTW of greedy predictions against ground truths on `images`
// (individual models are paired with the same viewer).
inline double validation_dtw(const PolicyModel& model, const Dataset& ds, const std::vector<std::string>& images,
                             PatchCache& cache) {
    const auto preds = predict_images(model, ds, images, cache);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& pred : preds)
        for (const auto* gt : ds.paths_for(pred.stimulus_id)) {
            if (model.mode() == Mode::Individual && gt->viewer_id != pred.viewer_id) continue;
            sum += metrics::dtw(pred, *gt);
            ++n;
        }
    if (n == 0) throw ValidationError("no ground-truth pairs for validation", "dataset");
    return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    double initial_val_dtw = 0.0;
    double best_val_dtw = 0.0;
    int best_epoch = -1;        // -1: the untrained model was best
    std::vector<nlohmann::json> log;
    std::size_t train_examples = 0;
    std::size_t dropped_short = 0;
};

struct TrainHooks {
    std::function<void(const nlohmann::json&)> on_log;  // every log record
    std::function<void(double)> on_progress;             // fraction in [0,1]
};

// Trains in place. With `cfg.out_dir` set, writes metrics.jsonl, last.eyfm,
// best.eyfm. The model ends holding the best parameters by validation DTW.
inline TrainResult train(PolicyModel& model, const Dataset& ds, const SaliencyProvider& env, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
    cfg.validate();
    const auto train_paths = ds.select(Split::Train, Split::Train);
    if (train_paths.empty()) throw ValidationError("dataset has no training scanpaths", "dataset");
    auto val_images = ds.images(Split::Test);
    if (val_images.empty()) throw ValidationError("dataset has no held-out images", "dataset");
    if (cfg.max_eval_images > 0 && val_images.size() > static_cast<std::size_t>(cfg.max_eval_images))
        val_images.resize(static_cast<std::size_t>(cfg.max_eval_images));

    model.set_t_default(median_first_duration(train_paths));
    if (model.mode() == Mode::Individual)
        for (const auto& v : ds.viewers(Split::Train))
            if (!model.has_viewer(v)) model.add_viewer(v);

    PatchCache cache(model);
    TrainResult result;
    auto examples = make_examples(model, ds, train_paths, &env, cache, &result.dropped_short);
    if (examples.empty()) throw ValidationError("every training scanpath is shorter than T", "T");
    result.train_examples = examples.size();

    std::unique_ptr<std::ofstream> log_file;
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        log_file = std::make_unique<std::ofstream>(cfg.out_dir / "metrics.jsonl", std::ios::binary);
    }
    auto emit = [&](nlohmann::json rec) {
        if (log_file) *log_file << rec.dump() << '\n' << std::flush;
        if (hooks.on_log) hooks.on_log(rec);
        result.log.push_back(std::move(rec));
    };
    CheckpointInfo info{cfg.config_text, {}};

    auto params = trainable(model);
    Adam opt(cfg.optimizer);
    std::mt19937_64 rng(cfg.seed);

    result.initial_val_dtw = validation_dtw(model, ds, val_images, cache);
    result.best_val_dtw = result.initial_val_dtw;
    emit({{"epoch", 0}, {"phase", "eval"}, {"val_dtw", result.initial_val_dtw}});
    PolicyModel best = model;

    const ReinforceOptions ropt{cfg.reward, true, cfg.baseline_samples};
    long step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const bool rl = cfg.use_rl && epoch > cfg.warmup_epochs;
        std::vector<std::size_t> order(examples.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0, reward_sum = 0.0, adv_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<Example> batch;
            for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i)
                batch.push_back(examples[order[i]]);
            ++step;
            nlohmann::json rec{{"step", step}, {"epoch", epoch}};
            if (rl) {
                const auto s = reinforce_step(model, batch, opt, params, ropt, cfg.seed ^ (0x9e37ULL * step));
                rec["phase"] = "reinforce";
                rec["reward"] = s.reward;
                rec["baseline"] = s.baseline;
                rec["advantage"] = s.advantage;
                rec["r_dtwd"] = s.r_dtwd;
                rec["r_sal"] = s.r_sal;
                rec["grad_norm"] = s.grad_norm;
                reward_sum += s.reward;
                adv_sum += s.advantage;
            } else {
                const auto s = supervised_step(model, batch, opt, params);
                rec["phase"] = "supervised";
                rec["loss"] = s.loss / static_cast<double>(batch.size());
                rec["grad_norm"] = s.grad_norm;
                loss_sum += s.loss / static_cast<double>(batch.size());
            }
            emit(std::move(rec));
            ++batches;
            if (hooks.on_progress)
                hooks.on_progress(((epoch - 1) + static_cast<double>(b + batch.size()) / order.size()) /
                                  std::max(1, cfg.epochs));
        }
        nlohmann::json summary{{"epoch", epoch}, {"phase", rl ? "reinforce_epoch" : "supervised_epoch"}};
        if (rl) {
            summary["mean_reward"] = reward_sum / batches;
            summary["mean_advantage"] = adv_sum / batches;
        } else {
            summary["mean_loss"] = loss_sum / batches;
        }
        emit(std::move(summary));

        if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            const double v = validation_dtw(model, ds, val_images, cache);
            emit({{"epoch", epoch}, {"phase", "eval"}, {"val_dtw", v}});
            if (v < result.best_val_dtw) {
                result.best_val_dtw = v;
                result.best_epoch = epoch;
                best = model;
                if (!cfg.out_dir.empty()) save_checkpoint(best, cfg.out_dir / "best.eyfm", info);
            }
        }
        if (!cfg.out_dir.empty()) save_checkpoint(model, cfg.out_dir / "last.eyfm", info);
    }
    model = best;
    if (!cfg.out_dir.empty() && result.best_epoch < 0) save_checkpoint(best, cfg.out_dir / "best.eyfm", info);
    return result;
}

// ---------------------------------------------------------------------------
// Personalization

struct PersonalizationConfig {
    int n_path = 50;
    int steps = 300;
    int batch_size = 10;
    double lr = 1e-2;
    bool freeze_policy = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_path < 1) throw ValidationError("n_path must be >= 1", "n_path");
        if (steps < 0) throw ValidationError("steps must be >= 0", "steps");
        if (batch_size < 1) throw ValidationError("batch_size must be >= 1", "batch_size");
        if (!(lr > 0)) throw ValidationError("learning rate must be positive", "lr");
    }
};

struct PersonalizationResult {
    std::size_t samples_used = 0;
    double initial_loss = 0.0;  // mean NLL before the first step
    double final_loss = 0.0;
};

// Fits a fresh embedding for `viewer_id` on up to n_path of its scanpaths by
// supervised NLL. With freeze_policy every other tensor is left untouched.
inline PersonalizationResult personalize(PolicyModel& model, const std::string& viewer_id,
                                         std::span<const Scanpath> samples, const Dataset& ds,
                                         const PersonalizationConfig& pcfg) {
    pcfg.validate();
    if (model.mode() != Mode::Individual) throw ValidationError("personalization needs an individual-mode model", "mode");
    if (samples.empty()) throw ValidationError("personalization needs at least one scanpath", "scanpaths");
    for (const auto& s : samples)
        if (!ds.has_stimulus(s.stimulus_id))
            throw ValidationError("scanpath references unknown stimulus '" + s.stimulus_id + "'", "scanpaths");

    const auto T = static_cast<std::size_t>(model.config().T);
    std::vector<Scanpath> usable;
    for (const auto& s : samples) {
        auto tr = truncate_or_reject(s, T);
        if (!tr.short_path) usable.push_back(std::move(tr.path));
        if (usable.size() == static_cast<std::size_t>(pcfg.n_path)) break;
    }
    if (usable.empty()) throw ValidationError("every personalization scanpath is shorter than T", "scanpaths");

    auto& emb = model.add_viewer(viewer_id);
    std::vector<ad::Parameter*> params{&emb};
    std::map<std::string, bool> saved_frozen;
    if (pcfg.freeze_policy) {
        for (auto& [n, p] : model.params()) {
            saved_frozen[n] = p.frozen;
            p.frozen = true;
        }
    } else {
        for (auto& [_, p] : model.params())
            if (!p.frozen) params.push_back(&p);
    }

    // With the encoder frozen its output is a constant per stimulus.
    PatchCache cache(model);
    std::map<std::string, Matrix> encoded;
    if (pcfg.freeze_policy)
        for (const auto& s : usable)
            if (!encoded.count(s.stimulus_id)) {
                Tape t(false);
                encoded.emplace(s.stimulus_id, model.encode_patches(t, *cache.get(ds.stimulus(s.stimulus_id))).value());
            }

    auto batch_loss = [&](Tape& t, std::span<const std::size_t> idx) {
        std::optional<Var> total;
        for (auto i : idx) {
            const auto& s = usable[i];
            Var img = pcfg.freeze_policy ? t.constant(encoded.at(s.stimulus_id))
                                         : model.encode_patches(t, *cache.get(ds.stimulus(s.stimulus_id)));
            Var ctx = model.encode_viewer(t, img, &emb);
            Var nll = ad::scale(model.sequence_log_prob(t, ctx, s.fixations, PolicyModel::pre_squash_matrix(s.fixations)), -1.0);
            total = total ? ad::add(*total, nll) : nll;
        }
        return *total;
    };
    auto mean_loss = [&] {
        std::vector<std::size_t> all(usable.size());
        std::iota(all.begin(), all.end(), 0);
        Tape t(false);
        return batch_loss(t, all).scalar() / static_cast<double>(usable.size());
    };

    PersonalizationResult r;
    r.samples_used = usable.size();
    r.initial_loss = mean_loss();
    Adam opt({pcfg.lr, 0.9, 0.999, 1e-8, 5.0});
    std::mt19937_64 rng(pcfg.seed);
    std::vector<std::size_t> order(usable.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    try {
        for (int step = 0; step < pcfg.steps; ++step) {
            std::vector<std::size_t> idx;
            while (idx.size() < std::min<std::size_t>(pcfg.batch_size, usable.size())) {
                if (cursor == order.size()) {
                    std::shuffle(order.begin(), order.end(), rng);
                    cursor = 0;
                }
                idx.push_back(order[cursor++]);
            }
            zero_grads(params);
            Tape t;
            Var loss = batch_loss(t, idx);
            if (!std::isfinite(loss.scalar())) throw Error("non-finite personalization loss");
            t.backward(loss, 1.0 / static_cast<double>(idx.size()));
            opt.step(params);
        }
    } catch (...) {
        for (auto& [n, f] : saved_frozen) model.params()[n].frozen = f;
        throw;
    }
    for (auto& [n, f] : saved_frozen) model.params()[n].frozen = f;
    r.final_loss = mean_loss();
    return r;
}

} // namespace scanflow
