#ifndef S4M_TRAIN_HPP
#define S4M_TRAIN_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "s4m/audio.hpp"
#include "s4m/checkpoint.hpp"
#include "s4m/config.hpp"
#include "s4m/model.hpp"
#include "s4m/net.hpp"
#include "s4m/objectives.hpp"

namespace s4m::train {

/// Adam with bias correction.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long t = 0;
    ModelParams m;
    ModelParams v;

    void step(ModelParams& params, const Gradients& grads)
    {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto& [name, p] : params) {
            auto g = grads.find(name);
            if (g == grads.end()) {
                continue;
            }
            auto [mit, m_new] = m.try_emplace(name, p.shape());
            auto [vit, v_new] = v.try_emplace(name, p.shape());
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g->second[i];
                double& mi = mit->second[i];
                double& vi = vit->second[i];
                mi = beta1 * mi + (1.0 - beta1) * gi;
                vi = beta2 * vi + (1.0 - beta2) * gi * gi;
                p[i] -= lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
            }
        }
    }
};

struct TrainState {
    long step = 0;
    int epoch = 0;
    double best_valid_loss = std::numeric_limits<double>::infinity();
    int epochs_since_improve = 0;
    Adam optimizer;
};

/// Records a validation loss. Returns true when `patience` consecutive
/// evaluations have failed to strictly improve on the best so far.
inline bool early_stop_update(TrainState& state, double valid_loss, int patience)
{
    if (valid_loss < state.best_valid_loss) {
        state.best_valid_loss = valid_loss;
        state.epochs_since_improve = 0;
        return false;
    }
    ++state.epochs_since_improve;
    return state.epochs_since_improve >= patience;
}

struct Example {
    std::string id;
    std::vector<double> mixture;
    std::vector<std::vector<double>> sources;
};

inline std::vector<Example> load_examples(const audio::Manifest& manifest, int sample_rate)
{
    std::vector<Example> out;
    for (const auto& e : manifest) {
        Example ex;
        ex.id = std::filesystem::path(e.mixture).stem().string();
        const auto mix = audio::read_wav(e.mixture);
        if (mix.sample_rate_hz != sample_rate) {
            throw invalid_argument(e.mixture + ": sample rate " + std::to_string(mix.sample_rate_hz) +
                                   " != configured " + std::to_string(sample_rate));
        }
        ex.mixture = mix.samples;
        for (const auto& s : e.sources) {
            auto clip = audio::read_wav(s);
            if (clip.samples.size() != ex.mixture.size()) {
                throw format_error(s + ": length differs from its mixture");
            }
            ex.sources.push_back(std::move(clip.samples));
        }
        out.push_back(std::move(ex));
    }
    return out;
}

struct Batch {
    Tensor mixture; // [B, 1, T]
    Tensor targets; // [B, N, T]
    std::vector<std::string> ids;
};

/// Crops `crop` samples (or the whole item if shorter than every crop) at
/// random offsets from the selected examples. An offset whose crop leaves a
/// source silent is redrawn (a bounded number of times), since SI-SNR is
/// undefined for an all-zero target.
inline Batch make_batch(const std::vector<Example>& data, const std::vector<std::size_t>& idx, std::size_t crop,
                        std::mt19937_64& rng)
{
    std::size_t len = crop;
    for (std::size_t i : idx) {
        len = std::min(len, data[i].mixture.size());
    }
    const std::size_t n = data[idx[0]].sources.size();
    Batch b{Tensor({idx.size(), 1, len}), Tensor({idx.size(), n, len}), {}};
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const Example& ex = data[idx[k]];
        const std::size_t span = ex.mixture.size() - len;
        auto silent_source = [&](std::size_t off) {
            return std::any_of(ex.sources.begin(), ex.sources.end(), [&](const std::vector<double>& src) {
                const auto first = src.begin() + static_cast<long>(off);
                return std::all_of(first, first + static_cast<long>(len), [](double v) { return v == 0.0; });
            });
        };
        std::size_t off = 0;
        if (span) {
            std::uniform_int_distribution<std::size_t> pick(0, span);
            off = pick(rng);
            for (int retry = 0; retry < 32 && silent_source(off); ++retry) {
                off = pick(rng);
            }
        }
        std::copy_n(ex.mixture.begin() + static_cast<long>(off), len, b.mixture.data() + k * len);
        for (std::size_t s = 0; s < n; ++s) {
            std::copy_n(ex.sources[s].begin() + static_cast<long>(off), len, b.targets.data() + (k * n + s) * len);
        }
        b.ids.push_back(ex.id);
    }
    return b;
}

struct ItemScore {
    std::string id;
    double loss = 0.0;    // negated mean SI-SNR under the best assignment
    double si_sdri = 0.0; // mean over sources
    double sdri = 0.0;
};

/// Full-length evaluation of one example.
inline ItemScore score_example(const Example& ex, const ModelParams& params, const SepConfig& cfg, bool zero_mean,
                               s4::Mode mode = s4::Mode::conv)
{
    const std::size_t t = ex.mixture.size();
    const std::size_t n = ex.sources.size();
    const Tensor est = net::infer(Tensor({1, 1, t}, ex.mixture), params, cfg, mode);
    Tensor tgt({n, t});
    for (std::size_t s = 0; s < n; ++s) {
        std::copy(ex.sources[s].begin(), ex.sources[s].end(), tgt.data() + s * t);
    }
    const Tensor est2(shape_t{n, t}, std::vector<double>(est.values().begin(), est.values().end()));
    const auto pit = objectives::upit_loss(est2, tgt, zero_mean);
    ItemScore out{ex.id, pit.loss, 0.0, 0.0};
    for (std::size_t e = 0; e < n; ++e) {
        const auto es = est2.values().subspan(e * t, t);
        const auto& y = ex.sources[pit.permutation[e]];
        out.si_sdri += objectives::si_sdri(es, y, ex.mixture, zero_mean) / static_cast<double>(n);
        out.sdri += objectives::sdri(es, y, ex.mixture) / static_cast<double>(n);
    }
    return out;
}

struct ValidResult {
    double loss = 0.0;
    double si_sdri = 0.0;
    double sdri = 0.0;
    std::vector<ItemScore> items;
};

inline ValidResult evaluate(const std::vector<Example>& data, const ModelParams& params, const SepConfig& cfg,
                            bool zero_mean = true, s4::Mode mode = s4::Mode::conv)
{
    ValidResult r;
    for (const auto& ex : data) {
        r.items.push_back(score_example(ex, params, cfg, zero_mean, mode));
        const double w = 1.0 / static_cast<double>(data.size());
        r.loss += w * r.items.back().loss;
        r.si_sdri += w * r.items.back().si_sdri;
        r.sdri += w * r.items.back().sdri;
    }
    return r;
}

struct TrainOptions {
    std::string checkpoint_path; // best model is written here when non-empty
    std::ostream* log = nullptr;
    /// Replaces the validation loss (epoch -> loss); used to exercise the
    /// stopping rule without a model that learns.
    std::function<double(int)> valid_override;
};

struct TrainResult {
    TrainState state;
    ModelParams final_params;
    ModelParams best_params;
    std::vector<double> step_losses;
    std::vector<double> valid_losses;
    std::vector<double> valid_si_sdri;
    bool early_stopped = false;
};

/// One optimizer update on a batch. Returns the pre-update loss.
inline double train_step(ModelParams& params, Adam& opt, const Batch& batch, const SepConfig& cfg,
                         const TrainConfig& tcfg, long step)
{
    Tape tape;
    const ParamVars p = bind_params(tape, params);
    const Var est = net::unfold_forward(tape.constant(batch.mixture), p, cfg, s4::Mode::train);
    const Var loss = objectives::pit_si_snr_loss(est, batch.targets, tcfg.zero_mean);
    const double value = loss.value()[0];
    auto describe = [&] {
        std::ostringstream os;
        os << "step " << step << ", batch items:";
        for (const auto& id : batch.ids) {
            os << ' ' << id;
        }
        return os.str();
    };
    if (!std::isfinite(value)) {
        throw training_diverged("non-finite loss at " + describe());
    }
    Gradients grads = tape.backward(loss);
    const double norm = clip_grad_norm(grads, tcfg.clip_norm);
    if (!std::isfinite(norm)) {
        throw training_diverged("non-finite gradient norm at " + describe());
    }
    opt.step(params, grads);
    return value;
}

inline TrainResult run_training(const SepConfig& cfg, const TrainConfig& tcfg, const std::vector<Example>& train_set,
                                const std::vector<Example>& valid_set, const TrainOptions& opts = {})
{
    if (train_set.empty()) {
        throw invalid_argument("train: empty training split");
    }
    TrainResult r;
    r.state.optimizer.lr = tcfg.learning_rate;
    ModelParams params = init_params(cfg, tcfg.seed);
    r.best_params = params;
    // Separate streams for batch order/crops and anything else.
    std::mt19937_64 data_rng(audio::item_seed(tcfg.seed, 1));
    const auto crop = static_cast<std::size_t>(std::lround(tcfg.crop_seconds * cfg.sample_rate_hz));
    const auto batch = static_cast<std::size_t>(std::max(1, tcfg.batch_size));

    auto validate = [&](int epoch) {
        double loss = 0.0;
        double sisdri = std::numeric_limits<double>::quiet_NaN();
        if (opts.valid_override) {
            loss = opts.valid_override(epoch);
        } else if (!valid_set.empty()) {
            const auto v = evaluate(valid_set, params, cfg, tcfg.zero_mean);
            loss = v.loss;
            sisdri = v.si_sdri;
        }
        r.valid_losses.push_back(loss);
        r.valid_si_sdri.push_back(sisdri);
        const bool improved = loss < r.state.best_valid_loss;
        const bool stop = early_stop_update(r.state, loss, tcfg.patience);
        if (improved) {
            r.best_params = params;
            if (!opts.checkpoint_path.empty()) {
                checkpoint::save(opts.checkpoint_path, cfg, params);
            }
        }
        if (opts.log) {
            *opts.log << "epoch " << epoch << " step " << r.state.step << " valid_loss " << loss << " valid_si_sdri "
                      << sisdri << (improved ? " *" : "") << '\n';
        }
        return stop;
    };

    std::vector<std::size_t> order(train_set.size());
    bool done = false;
    for (int epoch = 1; epoch <= tcfg.max_epochs && !done; ++epoch) {
        r.state.epoch = epoch;
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), data_rng);
        for (std::size_t start = 0; start < order.size() && !done; start += batch) {
            const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                               order.begin() + static_cast<long>(std::min(start + batch, order.size())));
            const Batch b = make_batch(train_set, idx, crop, data_rng);
            r.step_losses.push_back(train_step(params, r.state.optimizer, b, cfg, tcfg, r.state.step));
            ++r.state.step;
            if (opts.log && r.state.step % 50 == 0) {
                *opts.log << "step " << r.state.step << " loss " << r.step_losses.back() << '\n';
            }
            if (tcfg.valid_every > 0 && r.state.step % tcfg.valid_every == 0) {
                done = validate(epoch);
                r.early_stopped = done;
            }
            if (tcfg.max_steps > 0 && r.state.step >= tcfg.max_steps) {
                done = true;
            }
        }
        if (tcfg.valid_every <= 0 && !r.early_stopped) {
            const bool stop = validate(epoch);
            r.early_stopped = stop;
            done = done || stop;
        }
    }
    r.final_params = std::move(params);
    return r;
}

/// Loads a corpus directory (manifest.txt) and trains on its 80% split,
/// validating on the next 10%.
inline TrainResult train_on_corpus(const SepConfig& cfg, const TrainConfig& tcfg, const std::string& data_dir,
                                   const TrainOptions& opts = {})
{
    const auto manifest = audio::read_manifest((std::filesystem::path(data_dir) / "manifest.txt").string());
    const auto splits = audio::split_manifest(manifest);
    return run_training(cfg, tcfg, load_examples(splits.train, cfg.sample_rate_hz),
                        load_examples(splits.valid, cfg.sample_rate_hz), opts);
}

/// Separates one clip. Returns N estimates, each as long as the input.
inline std::vector<audio::AudioClip> separate(const checkpoint::Checkpoint& ckpt, const audio::AudioClip& mixture,
                                              s4::Mode mode)
{
    if (mixture.sample_rate_hz != ckpt.config.sample_rate_hz) {
        throw invalid_argument("separate: input sample rate " + std::to_string(mixture.sample_rate_hz) +
                               " != model rate " + std::to_string(ckpt.config.sample_rate_hz));
    }
    const std::size_t t = mixture.samples.size();
    const Tensor est = net::infer(Tensor({1, 1, t}, mixture.samples), ckpt.params, ckpt.config, mode);
    std::vector<audio::AudioClip> out;
    for (std::size_t n = 0; n < ckpt.config.n(); ++n) {
        audio::AudioClip clip{std::vector<double>(est.data() + n * t, est.data() + (n + 1) * t),
                              mixture.sample_rate_hz};
        out.push_back(std::move(clip));
    }
    return out;
}

/// Scales a clip down to a 0.9 peak when it would otherwise clip on write.
inline void limit_peak(audio::AudioClip& clip)
{
    double peak = 0.0;
    for (double v : clip.samples) {
        peak = std::max(peak, std::abs(v));
    }
    if (peak > 1.0) {
        for (double& v : clip.samples) {
            v *= audio::peak_target / peak;
        }
    }
}

} // namespace s4m::train

#endif
