#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mcl/adam.hpp"
#include "mcl/checkpoint.hpp"
#include "mcl/episode.hpp"
#include "mcl/error.hpp"
#include "mcl/model.hpp"
#include "mcl/ops.hpp"
#include "mcl/rng.hpp"
#include "mcl/selectivity.hpp"
#include "mcl/tensor.hpp"

namespace mcl {

struct EpisodeSpec {
    EpisodeKind kind = EpisodeKind::classification;
    std::size_t tasks = 5; // K
    std::size_t shots = 2; // S
};

// Whether to clip the averaged gradient to a global norm before the update.
// `automatic` follows the baseline convention: clipping is on only for plain
// task-loss runs (lambda == 0), off once the association regularizer is active.
enum class ClipMode { automatic, on, off };

struct TrainConfig {
    std::size_t batch_size = 16;
    std::size_t max_steps = 50000;
    double base_lr = 1e-4;
    double lr_decay_rate = 0.5;
    std::size_t lr_decay_step = 10000;
    double lambda_slct = 0.5;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;       // 0 disables the eval hook
    std::size_t checkpoint_every = 0; // 0 disables periodic checkpoints
    std::size_t threads = 1;
    ClipMode clip = ClipMode::automatic;
    double clip_norm = 1.0;
    SlctPositions slct_positions = SlctPositions::queries_only;
    SlctLayers slct_layers = SlctLayers::final_only;
    EpisodeSpec episode;
    ModelConfig model;

    bool clip_enabled() const {
        if (clip == ClipMode::on) return true;
        if (clip == ClipMode::off) return false;
        return lambda_slct == 0.0;
    }

    void validate() const {
        model.validate();
        if (batch_size < 1) throw config_error("batch_size must be at least 1");
        if (!(base_lr > 0.0)) throw config_error("base_lr must be positive");
        if (!(lr_decay_rate > 0.0) || lr_decay_rate > 1.0)
            throw config_error("lr_decay_rate must be in (0, 1]");
        if (lr_decay_step < 1) throw config_error("lr_decay_step must be at least 1");
        if (!(lambda_slct >= 0.0) || !std::isfinite(lambda_slct))
            throw config_error("lambda_slct must be finite and non-negative");
        if (episode.tasks < 1) throw config_error("episode tasks must be at least 1");
        if (episode.shots < 1) throw config_error("episode shots must be at least 1");
        if (threads < 1) throw config_error("threads must be at least 1");
        if (!(clip_norm > 0.0)) throw config_error("clip_norm must be positive");
    }
};

// Staircase decay: lr(step) = base_lr * rate^floor(step / decay_step).
inline double lr_schedule(const TrainConfig& cfg, std::size_t step) {
    double k = static_cast<double>(step / cfg.lr_decay_step);
    return cfg.base_lr * std::pow(cfg.lr_decay_rate, k);
}

struct EpisodeLosses {
    Tensor task;     // scalar; cross-entropy or mse averaged over the layout's queries
    Tensor slct;     // scalar; 0 when nothing is scorable
    Tensor combined; // task + lambda * slct; the task tensor itself when lambda == 0
};

inline EpisodeLosses episode_loss(const Model& m, const SequenceLayout& layout,
                                  double lambda_slct,
                                  SlctPositions positions = SlctPositions::queries_only,
                                  SlctLayers layers = SlctLayers::final_only) {
    if (layout.query_positions.empty())
        throw contract_error("episode_loss: layout has no query positions");
    AssocLog log;
    bool classify = layout.kind == EpisodeKind::classification;
    Tensor logits = model_forward(m, layout.tokens, classify ? &log : nullptr);

    std::size_t nq = layout.query_positions.size();
    Tensor task;
    for (std::size_t qi = 0; qi < nq; ++qi) {
        std::size_t pos = layout.query_positions[qi];
        Tensor term;
        if (classify) {
            int label = layout.labels[qi];
            if (label < 0)
                throw contract_error("episode_loss: classification query lacks a code");
            term = cross_entropy(row(logits, pos), static_cast<std::size_t>(label));
        } else {
            const std::vector<double>& y = layout.targets[qi];
            Tensor target = Tensor::from(y, {1, y.size()});
            term = mean_all(square(sub(row(logits, pos), target)));
        }
        task = qi == 0 ? term : add(task, term);
    }
    if (nq > 1) task = scalar_mul(task, 1.0 / static_cast<double>(nq));

    Tensor slct = episode_selectivity_loss(layout, log, positions, layers);
    Tensor combined = lambda_slct == 0.0 ? task : add(task, scalar_mul(slct, lambda_slct));
    return {task, slct, combined};
}

struct StepLog {
    std::size_t step = 0; // 0-based index of the update this row describes
    double lr = 0.0;
    double task_loss = 0.0;
    double slct_loss = 0.0;
    double combined_loss = 0.0;
};

struct TrainState {
    std::size_t step = 0;
    Model model;
    AdamState adam;
    double task_loss_sum = 0.0; // cumulative per-step means, for running averages
    double slct_loss_sum = 0.0;

    double task_loss_avg() const {
        return step ? task_loss_sum / static_cast<double>(step) : 0.0;
    }
    double slct_loss_avg() const {
        return step ? slct_loss_sum / static_cast<double>(step) : 0.0;
    }
};

struct TrainHooks {
    std::function<void(const StepLog&)> on_step;
    std::function<void(const TrainState&)> on_eval;
};

namespace detail_train {

// All stochasticity is derived by pure forks of the config seed, so training
// state never carries a mutable generator: stream 0 initializes parameters and
// stream 1 + step*batch + slot drives one episode. Resuming at step n therefore
// replays exactly the episodes an uninterrupted run would have drawn.
inline Rng episode_rng(const TrainConfig& cfg, std::size_t step, std::size_t slot) {
    return Rng(cfg.seed).fork(1 + step * cfg.batch_size + slot);
}

inline Episode sample_episode(const TrainConfig& cfg, const SamplePool* pool, Rng& rng) {
    return make_episode(cfg.episode.kind, pool, cfg.episode.tasks, cfg.episode.shots, 1,
                        cfg.model.vocab_size, rng);
}

struct EpisodeResult {
    std::vector<std::vector<double>> grads; // aligned with Model::trainable()
    double task = 0.0, slct = 0.0, combined = 0.0;
};

// One episode's contribution: every test query is scored against its own
// context-plus-query sequence and the losses are averaged, matching the
// objective of maximizing the likelihood of all test targets.
inline EpisodeResult run_episode(const TrainConfig& cfg, const Model& model,
                                 const SamplePool* pool, std::size_t step, std::size_t slot) {
    Rng rng = episode_rng(cfg, step, slot);
    Episode ep = sample_episode(cfg, pool, rng);
    std::size_t nt = ep.tests.size();
    double inv = 1.0 / static_cast<double>(nt);

    EpisodeResult res;
    Tensor total; // chains every query's graph so one backward covers them all
    for (std::size_t q = 0; q < nt; ++q) {
        SequenceLayout layout = assemble_sequence(ep, q);
        EpisodeLosses losses =
            episode_loss(model, layout, cfg.lambda_slct, cfg.slct_positions, cfg.slct_layers);
        total = q == 0 ? losses.combined : add(total, losses.combined);
        res.task += inv * losses.task.data()[0];
        res.slct += inv * losses.slct.data()[0];
        res.combined += inv * losses.combined.data()[0];
    }
    GradStore gs;
    backward_into(scalar_mul(total, inv), gs);
    std::vector<Tensor> trainable = model.trainable();
    res.grads.reserve(trainable.size());
    for (const Tensor& t : trainable) {
        const std::vector<double>* buf = gs.find(t.node());
        res.grads.push_back(buf ? *buf : std::vector<double>(t.size(), 0.0));
    }
    return res;
}

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail_train

// One optimizer update: batch_size fresh episodes, arithmetic-mean loss and
// gradients (fixed slot-order summation, so the result is bitwise identical
// for any thread count), optional global-norm clip, then Adam at the
// scheduled rate. Returns the per-step log row.
inline StepLog train_step(TrainState& ts, const TrainConfig& cfg, const SamplePool* pool) {
    std::size_t B = cfg.batch_size;
    std::vector<detail_train::EpisodeResult> results(B);
    std::size_t workers = std::min(cfg.threads, B);
    if (workers <= 1) {
        for (std::size_t b = 0; b < B; ++b)
            results[b] = detail_train::run_episode(cfg, ts.model, pool, ts.step, b);
    } else {
        std::vector<std::thread> threads;
        threads.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            threads.emplace_back([&, w] {
                for (std::size_t b = w; b < B; b += workers)
                    results[b] = detail_train::run_episode(cfg, ts.model, pool, ts.step, b);
            });
        }
        for (auto& t : threads) t.join();
    }

    std::vector<Tensor> params = ts.model.trainable();
    std::vector<std::vector<double>> grads(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) grads[i].assign(params[i].size(), 0.0);
    double task = 0.0, slct = 0.0, combined = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const auto& r = results[b];
        task += r.task;
        slct += r.slct;
        combined += r.combined;
        for (std::size_t i = 0; i < grads.size(); ++i)
            for (std::size_t j = 0; j < grads[i].size(); ++j) grads[i][j] += r.grads[i][j];
    }
    double inv = 1.0 / static_cast<double>(B);
    task *= inv;
    slct *= inv;
    combined *= inv;
    for (auto& g : grads)
        for (double& x : g) x *= inv;

    if (!std::isfinite(combined))
        throw numeric_error("training diverged at step " + std::to_string(ts.step) +
                            ": batch loss is not finite");

    if (cfg.clip_enabled()) clip_global_norm(grads, cfg.clip_norm);
    double lr = lr_schedule(cfg, ts.step);
    adam_step(params, grads, ts.adam, lr);

    StepLog log{ts.step, lr, task, slct, combined};
    ts.step += 1;
    ts.task_loss_sum += task;
    ts.slct_loss_sum += slct;
    return log;
}

inline TrainState init_train_state(const TrainConfig& cfg) {
    cfg.validate();
    TrainState ts;
    ts.model = init_model(cfg.model, Rng(cfg.seed).fork(0).seed());
    ts.adam.init(ts.model.trainable());
    return ts;
}

// Checkpoints carry the model tensors plus optimizer moments (one m/v tensor
// per trainable parameter, shaped like it), the cumulative loss sums, and the
// step counters, so a resumed run is indistinguishable from one that never
// stopped.
inline void save_train_state(const std::string& path, const TrainState& ts,
                             const TrainConfig& cfg) {
    std::map<std::string, std::string> extra;
    extra["train.step"] = std::to_string(ts.step);
    extra["train.adam_steps"] = std::to_string(ts.adam.step_count);
    extra["train.batch_size"] = std::to_string(cfg.batch_size);
    extra["train.max_steps"] = std::to_string(cfg.max_steps);
    extra["train.base_lr"] = detail_train::fmt_double(cfg.base_lr);
    extra["train.lr_decay_rate"] = detail_train::fmt_double(cfg.lr_decay_rate);
    extra["train.lr_decay_step"] = std::to_string(cfg.lr_decay_step);
    extra["train.lambda"] = detail_train::fmt_double(cfg.lambda_slct);
    extra["train.seed"] = std::to_string(cfg.seed);
    extra["train.episode_kind"] = episode_kind_name(cfg.episode.kind);
    extra["train.tasks"] = std::to_string(cfg.episode.tasks);
    extra["train.shots"] = std::to_string(cfg.episode.shots);

    std::vector<std::pair<std::string, Tensor>> extra_tensors;
    std::size_t slot = 0;
    for (const auto& [name, t] : ts.model.params) {
        if (!t.requires_grad()) continue;
        extra_tensors.emplace_back("adam.m." + name,
                                   Tensor::from(ts.adam.m[slot], t.shape()));
        extra_tensors.emplace_back("adam.v." + name,
                                   Tensor::from(ts.adam.v[slot], t.shape()));
        ++slot;
    }
    extra_tensors.emplace_back("train.loss_sums",
                               Tensor::from({ts.task_loss_sum, ts.slct_loss_sum}, {2}));
    save_model(path, ts.model, extra, extra_tensors);
}

inline TrainState load_train_state(const std::string& path, const TrainConfig& cfg) {
    cfg.validate();
    CheckpointData ck = read_checkpoint(path);
    TrainState ts;
    ts.model = model_from_checkpoint(ck);

    auto want = config_to_map(cfg.model);
    auto have = config_to_map(ts.model.cfg);
    for (const auto& [k, v] : want) {
        if (have.at(k) != v)
            throw config_error("checkpoint model mismatch: " + k + " is " + have.at(k) +
                               ", requested " + v);
    }

    auto require_key = [&](const char* key) -> const std::string& {
        auto it = ck.config.find(key);
        if (it == ck.config.end())
            throw data_error(std::string("checkpoint lacks ") + key +
                             "; not a training checkpoint");
        return it->second;
    };
    ts.step = static_cast<std::size_t>(std::stoull(require_key("train.step")));
    ts.adam.init(ts.model.trainable());
    ts.adam.step_count = static_cast<std::size_t>(std::stoull(require_key("train.adam_steps")));
    std::size_t slot = 0;
    for (const auto& [name, t] : ts.model.params) {
        if (!t.requires_grad()) continue;
        const Tensor* mt = ck.find("adam.m." + name);
        const Tensor* vt = ck.find("adam.v." + name);
        if (!mt || !vt)
            throw data_error("checkpoint lacks optimizer moments for '" + name + "'");
        if (mt->size() != t.size() || vt->size() != t.size())
            throw data_error("optimizer moments for '" + name + "' have the wrong size");
        ts.adam.m[slot] = mt->data();
        ts.adam.v[slot] = vt->data();
        ++slot;
    }
    const Tensor* sums = ck.find("train.loss_sums");
    if (!sums || sums->size() != 2)
        throw data_error("checkpoint lacks train.loss_sums");
    ts.task_loss_sum = sums->data()[0];
    ts.slct_loss_sum = sums->data()[1];
    return ts;
}

namespace detail_train {

inline void run_training_loop(TrainState& ts, const TrainConfig& cfg, const SamplePool* pool,
                              const std::string& out_dir, const TrainHooks& hooks) {
    std::ofstream metrics;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::filesystem::path mpath = std::filesystem::path(out_dir) / "metrics.csv";
        bool fresh = !std::filesystem::exists(mpath) || std::filesystem::file_size(mpath) == 0;
        metrics.open(mpath, std::ios::app);
        if (!metrics) throw io_error("cannot open '" + mpath.string() + "' for appending");
        if (fresh) metrics << "step,lr,task_loss,slct_loss,combined_loss\n";
    }

    while (ts.step < cfg.max_steps) {
        StepLog log = train_step(ts, cfg, pool);
        if (metrics.is_open()) {
            metrics << log.step << ',' << fmt_double(log.lr) << ',' << fmt_double(log.task_loss)
                    << ',' << fmt_double(log.slct_loss) << ',' << fmt_double(log.combined_loss)
                    << '\n';
            metrics.flush();
        }
        if (hooks.on_step) hooks.on_step(log);
        if (cfg.checkpoint_every && ts.step % cfg.checkpoint_every == 0 && !out_dir.empty()) {
            std::filesystem::path cpath =
                std::filesystem::path(out_dir) / ("ckpt-" + std::to_string(ts.step) + ".bin");
            save_train_state(cpath.string(), ts, cfg);
        }
        if (cfg.eval_every && ts.step % cfg.eval_every == 0 && hooks.on_eval) hooks.on_eval(ts);
    }
    if (!out_dir.empty()) {
        std::filesystem::path fpath = std::filesystem::path(out_dir) / "ckpt-final.bin";
        save_train_state(fpath.string(), ts, cfg);
    }
}

} // namespace detail_train

// Meta-trains from scratch. `pool` may be null for pool-free episode kinds.
// When `out_dir` is set, per-step rows are appended to metrics.csv and
// checkpoints are written there (ckpt-final.bin always, ckpt-<step>.bin per
// checkpoint_every). Deterministic: the same config produces bit-identical
// checkpoints.
inline TrainState meta_train(const TrainConfig& cfg, const SamplePool* pool = nullptr,
                             const std::string& out_dir = {}, const TrainHooks& hooks = {}) {
    TrainState ts = init_train_state(cfg);
    detail_train::run_training_loop(ts, cfg, pool, out_dir, hooks);
    return ts;
}

// Continues a run from a checkpoint as if it had never stopped: the episode
// streams depend only on (seed, step), so training to max_steps reproduces an
// uninterrupted run bit for bit. The checkpoint's model configuration must
// match the requested one.
inline TrainState resume_training(const std::string& checkpoint_path, const TrainConfig& cfg,
                                  const SamplePool* pool = nullptr,
                                  const std::string& out_dir = {},
                                  const TrainHooks& hooks = {}) {
    TrainState ts = load_train_state(checkpoint_path, cfg);
    detail_train::run_training_loop(ts, cfg, pool, out_dir, hooks);
    return ts;
}

} // namespace mcl
