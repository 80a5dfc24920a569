#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "lcp/adam.hpp"
#include "lcp/autodiff.hpp"
#include "lcp/bev.hpp"
#include "lcp/common.hpp"
#include "lcp/csv.hpp"
#include "lcp/dataio.hpp"
#include "lcp/model.hpp"
#include "lcp/params.hpp"
#include "lcp/rng.hpp"
#include "lcp/scenarios.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

// Staged difficulty: epoch e admits lane-change samples up to a time-to-
// lane-change bound and ramps the regression weight gamma alongside.
struct CurriculumStage {
  double max_ttlc = 5.2;
  double gamma = 1.0;
};

struct CurriculumSchedule {
  // Ramp for epochs 0..5; later epochs repeat the final stage.
  std::vector<CurriculumStage> ramp = {{0.2, 0.0}, {1.2, 0.2}, {2.2, 0.4},
                                       {3.2, 0.6}, {4.2, 0.8}, {5.2, 1.0}};
  bool enabled = true;

  CurriculumStage stage(int epoch) const {
    if (!enabled || ramp.empty())
      return CurriculumStage{};  // full data, gamma = 1
    const std::size_t i = std::min<std::size_t>(
        static_cast<std::size_t>(std::max(epoch, 0)), ramp.size() - 1);
    return ramp[i];
  }

  void validate() const {
    for (std::size_t i = 0; i < ramp.size(); ++i) {
      require(ramp[i].gamma >= 0.0 && ramp[i].gamma <= 1.0, ErrorKind::Config,
              "curriculum: gamma must lie in [0,1]");
      if (i > 0) {
        require(ramp[i].max_ttlc >= ramp[i - 1].max_ttlc, ErrorKind::Config,
                "curriculum: max ttlc must be non-decreasing");
        require(ramp[i].gamma >= ramp[i - 1].gamma, ErrorKind::Config,
                "curriculum: gamma must be non-decreasing");
      }
    }
  }
};

struct TrainConfig {
  AdamConfig adam{};  // learning_rate 0.001, betas 0.9/0.999, eps 1e-8
  std::size_t batch_size = 64;
  int max_epochs = 20;
  int patience = 3;
  int min_epochs = 6;
  std::uint64_t seed = 1;

  void validate(const CurriculumSchedule& sched) const {
    require(batch_size >= 1, ErrorKind::Config, "train: batch_size must be >= 1");
    require(max_epochs >= 1, ErrorKind::Config, "train: max_epochs must be >= 1");
    require(patience >= 1, ErrorKind::Config, "train: patience must be >= 1");
    // The difficulty ramp must be complete before early stopping may fire.
    require(!sched.enabled ||
                min_epochs >= static_cast<int>(sched.ramp.size()),
            ErrorKind::Config,
            "train: min_epochs must cover the curriculum ramp");
  }
};

// One trainable sample: rendering happens on demand from the recording.
struct TrainSample {
  const Recording* rec = nullptr;
  const FrameIndex* index = nullptr;
  std::int64_t scenario_id = 0;
  Sample sample;
};

using Dataset = std::vector<TrainSample>;

// Lane-keep samples are always admitted; lane-change samples only up to the
// stage's ttlc bound (tolerance absorbs representation noise in 0.2-step
// grids).
inline Dataset curriculum_filter(const Dataset& samples, double max_ttlc) {
  Dataset out;
  out.reserve(samples.size());
  for (const TrainSample& s : samples)
    if (s.sample.label == Label::LK || s.sample.ttlc <= max_ttlc + 1e-9)
      out.push_back(s);
  return out;
}

struct EpochStats {
  int epoch = 0;
  double ce = 0.0;        // mean cross-entropy over the epoch's samples
  double mse = 0.0;       // mean squared ttlc error over lane-change samples
  double total = 0.0;     // ce + gamma * mse
  double val_loss = 0.0;  // full validation loss at gamma = 1
  std::size_t n_samples = 0;
  double seconds = 0.0;
};

inline void write_history(const std::filesystem::path& path,
                          const std::vector<EpochStats>& history) {
  CsvWriter w(path,
              {"epoch", "ce", "mse", "total", "val_loss", "n_samples",
               "seconds"});
  for (const EpochStats& e : history) {
    w.field(e.epoch).field(e.ce).field(e.mse).field(e.total).field(e.val_loss);
    w.field(e.n_samples).field(e.seconds).end_row();
  }
  w.flush();
}

// Early stopping on validation loss: stop once `patience` consecutive
// epochs fail to improve on the best, but never before `min_epochs` epochs
// have completed.
class EarlyStopper {
 public:
  EarlyStopper(int patience, int min_epochs)
      : patience_(patience), min_epochs_(min_epochs) {}

  // Feed one epoch's validation loss; true means training should stop.
  bool observe(double val_loss) {
    ++observed_;
    if (val_loss < best_loss_) {
      best_loss_ = val_loss;
      best_epoch_ = observed_ - 1;
      streak_ = 0;
    } else {
      ++streak_;
    }
    return observed_ >= min_epochs_ && streak_ >= patience_;
  }

  bool improved_last() const { return streak_ == 0; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  int patience_;
  int min_epochs_;
  int observed_ = 0;
  int streak_ = 0;
  int best_epoch_ = -1;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

namespace detail {

// Per-sample loss nodes recorded on a fresh tape.  The per-sample weights
// (1/batch for CE, gamma/n_lc for the masked MSE) make the summed sample
// gradients equal the batch-objective gradient while only one sample's
// activations live at a time.
struct SampleLossInfo {
  double ce = 0.0;
  double sq_err = 0.0;  // squared ttlc error; meaningful for LC samples only
  bool lane_change = false;
};

template <typename T>
SampleLossInfo sample_pass(Tape<T>& tape, ModelGraph<T>& graph,
                           const Tensor<T>* stack, const TrainSample& ts,
                           bool train, Rng* drop_rng, T w_ce, T w_mse,
                           bool do_backward) {
  SampleLossInfo info;
  info.lane_change =
      ts.sample.label != Label::LK && std::isfinite(ts.sample.ttlc);
  const ModelOut<T> out = graph.forward(stack, train, drop_rng,
                                        /*want_ttlc=*/info.lane_change);
  Tensor<T> one_hot({3});
  one_hot.data[static_cast<std::size_t>(ts.sample.label)] = T{1};
  const auto ce = tape.cross_entropy(out.probs, std::move(one_hot));
  info.ce = static_cast<double>(tape.value(ce).data[0]);

  typename Tape<T>::Id root;
  if (info.lane_change) {
    Tensor<T> target({1}, static_cast<T>(ts.sample.ttlc));
    Tensor<T> mask({1}, T{1});
    const auto se = tape.mse(out.ttlc, std::move(target), std::move(mask));
    info.sq_err = static_cast<double>(tape.value(se).data[0]);
    root = tape.weighted_sum({ce, se}, {w_ce, w_mse});
  } else {
    root = tape.weighted_sum({ce}, {w_ce});
  }
  if (do_backward) tape.backward(root);
  return info;
}

}  // namespace detail

// One pass over `subset` in shuffled order: minibatches of `batch_size`
// (final partial batch included), gradient accumulation sample by sample,
// one optimizer step per batch.
inline EpochStats train_epoch(ParamStore<float>& params, Adam<float>& opt,
                              const Dataset& subset, double gamma,
                              const TrainConfig& tc, const ProblemConfig& pc,
                              const BevSpec& bev, const ModelConfig& mc,
                              const QuadrantIndex& qi, Rng shuffle_rng,
                              Rng dropout_rng) {
  require(!subset.empty(), ErrorKind::Data, "train: epoch subset is empty");
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<std::size_t> order(subset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, shuffle_rng);

  std::vector<Tensor<float>> grads;
  grads.reserve(params.size());
  for (const auto& [name, t] : params.items)
    grads.push_back(Tensor<float>::zeros_like(t));

  EpochStats stats;
  stats.n_samples = subset.size();
  double ce_sum = 0.0, se_sum = 0.0;
  std::size_t n_lc = 0;

  Tape<float> tape;
  for (std::size_t begin = 0; begin < order.size(); begin += tc.batch_size) {
    const std::size_t end = std::min(order.size(), begin + tc.batch_size);
    const std::size_t batch = end - begin;
    std::size_t batch_lc = 0;
    for (std::size_t k = begin; k < end; ++k)
      batch_lc += subset[order[k]].sample.label != Label::LK;
    const float w_ce = 1.0f / static_cast<float>(batch);
    const float w_mse =
        batch_lc > 0 ? static_cast<float>(gamma) / static_cast<float>(batch_lc)
                     : 0.0f;

    for (std::size_t k = begin; k < end; ++k) {
      const TrainSample& ts = subset[order[k]];
      const BevStack stack = render_stack(*ts.rec, *ts.index, ts.sample, pc, bev);
      tape.reset();
      ModelGraph<float> graph(tape, params, qi, mc);
      Rng drop = dropout_rng.split(static_cast<std::uint64_t>(k));
      const detail::SampleLossInfo info = detail::sample_pass<float>(
          tape, graph, &stack, ts, true, &drop, w_ce, w_mse, true);
      ce_sum += info.ce;
      if (info.lane_change) {
        se_sum += info.sq_err;
        ++n_lc;
      }
      const std::vector<Tape<float>::Id>& leaves = graph.param_leaves();
      for (std::size_t j = 0; j < leaves.size(); ++j) {
        const Tensor<float>& g = tape.grad(leaves[j]);
        float* acc = grads[j].ptr();
        const float* src = g.ptr();
        for (std::size_t i = 0; i < g.numel(); ++i) acc[i] += src[i];
      }
    }

    opt.step(params, grads);
    for (Tensor<float>& g : grads)
      std::fill(g.data.begin(), g.data.end(), 0.0f);
  }

  stats.ce = ce_sum / static_cast<double>(subset.size());
  stats.mse = n_lc > 0 ? se_sum / static_cast<double>(n_lc) : 0.0;
  stats.total = stats.ce + gamma * stats.mse;
  stats.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return stats;
}

// Validation loss: same objective evaluated with dropout off and gamma = 1,
// so epochs remain comparable while the training ramp moves.
inline double validate(const ParamStore<float>& params, const Dataset& val,
                       const ProblemConfig& pc, const BevSpec& bev,
                       const ModelConfig& mc, const QuadrantIndex& qi) {
  require(!val.empty(), ErrorKind::Data, "validate: empty dataset");
  double ce_sum = 0.0, se_sum = 0.0;
  std::size_t n_lc = 0;
  Tape<float> tape;
  for (const TrainSample& ts : val) {
    const BevStack stack = render_stack(*ts.rec, *ts.index, ts.sample, pc, bev);
    tape.reset();
    ModelGraph<float> graph(tape, params, qi, mc);
    const detail::SampleLossInfo info = detail::sample_pass<float>(
        tape, graph, &stack, ts, false, nullptr, 1.0f, 1.0f, false);
    ce_sum += info.ce;
    if (info.lane_change) {
      se_sum += info.sq_err;
      ++n_lc;
    }
  }
  const double ce = ce_sum / static_cast<double>(val.size());
  const double mse = n_lc > 0 ? se_sum / static_cast<double>(n_lc) : 0.0;
  return ce + mse;
}

struct FitResult {
  ParamStore<float> params;  // best-validation checkpoint
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
};

// Full training loop: curriculum filtering + gamma ramp per epoch, Adam
// updates, early stopping on validation loss, best-checkpoint return.
inline FitResult fit(
    const Dataset& train, const Dataset& val, const TrainConfig& tc,
    const CurriculumSchedule& sched, const ProblemConfig& pc,
    const BevSpec& bev, const ModelConfig& mc,
    const std::function<void(const EpochStats&)>& progress = {}) {
  sched.validate();
  tc.validate(sched);
  require(!train.empty(), ErrorKind::Data, "fit: empty training set");
  require(!val.empty(), ErrorKind::Data, "fit: empty validation set");

  const QuadrantIndex qi = make_quadrant_index(mc);
  const Rng root(tc.seed);
  FitResult result;
  ParamStore<float> params = init_params<float>(mc, root);
  Adam<float> opt(params, tc.adam);
  EarlyStopper stopper(tc.patience, tc.min_epochs);

  for (int epoch = 0; epoch < tc.max_epochs; ++epoch) {
    const CurriculumStage stage = sched.stage(epoch);
    const Dataset subset = curriculum_filter(train, stage.max_ttlc);
    require(!subset.empty(), ErrorKind::Data,
            "fit: curriculum left no samples at epoch " +
                std::to_string(epoch));
    const std::uint64_t e = static_cast<std::uint64_t>(epoch);
    EpochStats stats = train_epoch(params, opt, subset, stage.gamma, tc, pc,
                                   bev, mc, qi, root.split("shuffle").split(e),
                                   root.split("dropout").split(e));
    stats.epoch = epoch;
    stats.val_loss = validate(params, val, pc, bev, mc, qi);
    result.history.push_back(stats);
    if (progress) progress(stats);

    const bool stop = stopper.observe(stats.val_loss);
    if (stopper.improved_last()) {
      result.params = params;  // archive the new best checkpoint
      result.best_epoch = epoch;
      result.best_val = stats.val_loss;
    }
    if (stop) break;
  }
  return result;
}

}  // namespace lcp
