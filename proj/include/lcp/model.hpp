#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "lcp/autodiff.hpp"
#include "lcp/bev.hpp"
#include "lcp/common.hpp"
#include "lcp/params.hpp"
#include "lcp/rng.hpp"
#include "lcp/scenarios.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

// Architecture hyperparameters.  The backbone is three conv(3x3,16) →
// maxpool(2x2) → ReLU stages, so the feature map is the input raster
// shrunk by 8 in both axes.
struct ModelConfig {
  std::size_t in_channels = 10;  // observation frames per stack
  std::size_t channels = 16;
  std::size_t feat_rows = 25;  // longitudinal cells after 3 pools
  std::size_t feat_cols = 10;  // lateral cells
  std::size_t front_rows = 13;  // rows 0..front_rows-1 are "front"
  std::size_t right_cols = 5;   // cols 0..right_cols-1 are "right"
  std::size_t cls_hidden = 128;
  std::size_t reg_hidden = 512;
  double dropout = 0.5;

  std::size_t flat() const { return channels * feat_rows * feat_cols; }
  // Shared attention weight length: smaller quadrants are zero-padded up
  // to the largest one.
  std::size_t padded_len() const {
    return channels * std::max(front_rows, feat_rows - front_rows) *
           std::max(right_cols, feat_cols - right_cols);
  }
  void validate() const {
    require(in_channels >= 1 && channels >= 1, ErrorKind::Config,
            "model: channel counts must be >= 1");
    require(front_rows >= 1 && front_rows < feat_rows, ErrorKind::Config,
            "model: front_rows must split the feature rows");
    require(right_cols >= 1 && right_cols < feat_cols, ErrorKind::Config,
            "model: right_cols must split the feature columns");
    require(cls_hidden >= 1 && reg_hidden >= 1, ErrorKind::Config,
            "model: hidden widths must be >= 1");
    require(dropout >= 0.0 && dropout < 1.0, ErrorKind::Config,
            "model: dropout must lie in [0,1)");
  }
};

// Derive and validate the model geometry for a given raster and timing
// configuration.
inline ModelConfig derive_model_config(const ProblemConfig& pc,
                                       const BevSpec& bev) {
  ModelConfig mc;
  mc.in_channels = static_cast<std::size_t>(pc.n_obs());
  require(bev.long_px % 8 == 0 && bev.lat_px % 8 == 0, ErrorKind::Config,
          "model: raster extents must be divisible by 8 (three 2x2 pools)");
  mc.feat_rows = bev.long_px / 8;
  mc.feat_cols = bev.lat_px / 8;
  mc.front_rows = (mc.feat_rows + 1) / 2;  // middle row joins the front
  mc.right_cols = mc.feat_cols / 2;
  return mc;
}

// Quadrant order everywhere: FR, FL, BR, BL.
enum Quadrant { kFR = 0, kFL = 1, kBR = 2, kBL = 3 };

inline const char* quadrant_name(int q) {
  static const char* names[4] = {"FR", "FL", "BR", "BL"};
  return names[q];
}

// Precomputed index maps tying the flattened feature vector to quadrants.
//
// With the canonical raster orientation (travel toward decreasing row,
// driver's right toward decreasing column), low rows are in front of the
// vehicle and low columns to its right.  The middle row of an odd extent
// joins the front half; right/left split at feat_cols/2.
struct QuadrantIndex {
  std::array<std::vector<std::int64_t>, 4> gather;  // padded with -1
  std::vector<std::int64_t> cell_map;  // flat cell -> quadrant
  std::size_t padded_len = 0;
};

inline QuadrantIndex make_quadrant_index(const ModelConfig& cfg) {
  QuadrantIndex qi;
  qi.padded_len = cfg.padded_len();
  qi.cell_map.resize(cfg.flat());
  const std::size_t rows = cfg.feat_rows, cols = cfg.feat_cols;
  for (int q = 0; q < 4; ++q) {
    const bool front = q == kFR || q == kFL;
    const bool right = q == kFR || q == kBR;
    const std::size_t y0 = front ? 0 : cfg.front_rows;
    const std::size_t y1 = front ? cfg.front_rows : rows;
    const std::size_t x0 = right ? 0 : cfg.right_cols;
    const std::size_t x1 = right ? cfg.right_cols : cols;
    std::vector<std::int64_t>& g = qi.gather[static_cast<std::size_t>(q)];
    for (std::size_t c = 0; c < cfg.channels; ++c)
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) {
          const std::size_t flat = (c * rows + y) * cols + x;
          g.push_back(static_cast<std::int64_t>(flat));
          qi.cell_map[flat] = q;
        }
    g.resize(qi.padded_len, -1);  // zero padding at the tail
  }
  return qi;
}

// The canonical tensor list: archive order, optimizer order, and the
// binding order used by ModelGraph.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>>
param_spec(const ModelConfig& cfg) {
  const std::size_t c = cfg.channels;
  return {
      {"conv1.w", {c, cfg.in_channels, 3, 3}},
      {"conv1.b", {c}},
      {"conv2.w", {c, c, 3, 3}},
      {"conv2.b", {c}},
      {"conv3.w", {c, c, 3, 3}},
      {"conv3.b", {c}},
      {"att.w", {1, cfg.padded_len()}},
      {"att.b", {1}},
      {"cls.fc1.w", {cfg.cls_hidden, cfg.flat()}},
      {"cls.fc1.b", {cfg.cls_hidden}},
      {"cls.fc2.w", {3, cfg.cls_hidden}},
      {"cls.fc2.b", {3}},
      {"reg.fc1.w", {cfg.reg_hidden, cfg.flat()}},
      {"reg.fc1.b", {cfg.reg_hidden}},
      {"reg.fc2.w", {1, cfg.reg_hidden}},
      {"reg.fc2.b", {1}},
  };
}

// Fan-in-scaled uniform init (±sqrt(1/fan_in)) for weights, zero biases
// (rank-1 tensors).  Each tensor draws from its own named substream, so
// adding or reordering tensors cannot silently shift another's values.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, const Rng& root) {
  ParamStore<T> p;
  for (const auto& [name, shape] : param_spec(cfg)) {
    Tensor<T> t(shape);
    if (t.rank() >= 2) {
      const std::size_t fan_in = t.numel() / shape[0];
      Rng rng = root.split("init").split(name);
      const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
      for (T& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    p.add(name, std::move(t));
  }
  return p;
}

// Verify a loaded archive against the expected layout before using it.
template <typename T>
void check_params(const ParamStore<T>& p, const ModelConfig& cfg) {
  const auto spec = param_spec(cfg);
  require(p.size() == spec.size(), ErrorKind::Schema,
          "parameter archive holds " + std::to_string(p.size()) +
              " tensors, expected " + std::to_string(spec.size()));
  for (const auto& [name, shape] : spec) {
    const Tensor<T>* t = p.find(name);
    require(t != nullptr, ErrorKind::Schema,
            "parameter archive missing tensor '" + name + "'");
    require(t->shape == shape, ErrorKind::Schema,
            "parameter tensor '" + name + "' has shape " +
                shape_string(t->shape) + ", expected " + shape_string(shape));
  }
}

template <typename T>
struct ModelOut {
  typename Tape<T>::Id probs = -1;   // [3] — P(LK), P(RLC), P(LLC)
  typename Tape<T>::Id ttlc = -1;    // [1] — seconds, >= 0
  typename Tape<T>::Id alpha = -1;   // [4] — quadrant attention
  typename Tape<T>::Id scores = -1;  // [4] — pre-softmax attention scores
};

// Parameters bound onto a tape as leaves.  One binding serves any number
// of forward passes recorded on the same tape.
template <typename T>
class ModelGraph {
 public:
  using Id = typename Tape<T>::Id;

  ModelGraph(Tape<T>& tape, const ParamStore<T>& params,
             const QuadrantIndex& qi, const ModelConfig& cfg)
      : tape_(&tape), qi_(&qi), cfg_(&cfg) {
    for (const auto& [name, t] : params.items)
      leaves_.push_back(tape.leaf(&t, true));
    auto id_of = [&](const char* name) {
      for (std::size_t i = 0; i < params.items.size(); ++i)
        if (params.items[i].first == name) return leaves_[i];
      fail(ErrorKind::State, std::string("model: missing parameter '") +
                                 name + "'");
    };
    conv_w_[0] = id_of("conv1.w");
    conv_b_[0] = id_of("conv1.b");
    conv_w_[1] = id_of("conv2.w");
    conv_b_[1] = id_of("conv2.b");
    conv_w_[2] = id_of("conv3.w");
    conv_b_[2] = id_of("conv3.b");
    att_w_ = id_of("att.w");
    att_b_ = id_of("att.b");
    cls1_w_ = id_of("cls.fc1.w");
    cls1_b_ = id_of("cls.fc1.b");
    cls2_w_ = id_of("cls.fc2.w");
    cls2_b_ = id_of("cls.fc2.b");
    reg1_w_ = id_of("reg.fc1.w");
    reg1_b_ = id_of("reg.fc1.b");
    reg2_w_ = id_of("reg.fc2.w");
    reg2_b_ = id_of("reg.fc2.b");
  }

  const std::vector<Id>& param_leaves() const { return leaves_; }

  // Record one forward pass.  `stack` must outlive the tape.  In training
  // mode the two dropout layers consume `dropout_rng` (classifier head
  // first, so the classifier sees the same mask stream either way).  A
  // caller that will not read the time-to-lane-change output — a lane-keep
  // training sample contributes no regression loss — can pass
  // want_ttlc=false to skip recording the regression head entirely; its
  // ttlc id is then -1.
  ModelOut<T> forward(const Tensor<T>* stack, bool train,
                      Rng* dropout_rng = nullptr, bool want_ttlc = true) {
    Tape<T>& tp = *tape_;
    require(!train || dropout_rng != nullptr, ErrorKind::State,
            "model: training-mode forward needs a dropout stream");
    Id x = tp.leaf(stack, false);
    for (int s = 0; s < 3; ++s)
      x = tp.relu(tp.maxpool2d(tp.conv2d(x, conv_w_[s], conv_b_[s])));
    const Id h = tp.flatten(x);

    // Quadrant attention: one shared linear scorer over each flattened
    // (zero-padded) quadrant, softmax over the four scores, then each
    // feature cell scaled by its quadrant's weight.
    std::vector<Id> score_parts;
    for (int q = 0; q < 4; ++q) {
      const Id hq = tp.gather_pad(h, &qi_->gather[static_cast<std::size_t>(q)]);
      score_parts.push_back(tp.linear(hq, att_w_, att_b_));
    }
    ModelOut<T> out;
    out.scores = tp.concat(score_parts);
    out.alpha = tp.softmax(out.scores);
    const Id context = tp.index_scale(h, out.alpha, &qi_->cell_map);

    Id c1 = tp.relu(tp.linear(context, cls1_w_, cls1_b_));
    c1 = tp.dropout(c1, cfg_->dropout, train ? *dropout_rng : dummy_rng_,
                    train);
    out.probs = tp.softmax(tp.linear(c1, cls2_w_, cls2_b_));

    if (want_ttlc) {
      Id r1 = tp.relu(tp.linear(context, reg1_w_, reg1_b_));
      r1 = tp.dropout(r1, cfg_->dropout, train ? *dropout_rng : dummy_rng_,
                      train);
      out.ttlc = tp.relu(tp.linear(r1, reg2_w_, reg2_b_));
    } else {
      out.ttlc = -1;
    }
    return out;
  }

 private:
  Tape<T>* tape_;
  const QuadrantIndex* qi_;
  const ModelConfig* cfg_;
  std::vector<Id> leaves_;
  Id conv_w_[3] = {-1, -1, -1}, conv_b_[3] = {-1, -1, -1};
  Id att_w_ = -1, att_b_ = -1;
  Id cls1_w_ = -1, cls1_b_ = -1, cls2_w_ = -1, cls2_b_ = -1;
  Id reg1_w_ = -1, reg1_b_ = -1, reg2_w_ = -1, reg2_b_ = -1;
  inline static Rng dummy_rng_{0};
};

// The composed multi-task objective over a batch recorded on one tape:
// total = CE(probs, labels) + gamma * MSE(ttlc_pred, ttlc | LC samples).
template <typename T>
struct BatchLossNodes {
  typename Tape<T>::Id total = -1, ce = -1, mse = -1;
};

template <typename T>
BatchLossNodes<T> mtl_loss(Tape<T>& tape,
                           const std::vector<typename Tape<T>::Id>& probs,
                           const std::vector<typename Tape<T>::Id>& ttlc_pred,
                           const std::vector<Label>& labels,
                           const std::vector<double>& ttlc_true,
                           double gamma) {
  require(gamma >= 0.0, ErrorKind::Config, "mtl loss: gamma must be >= 0");
  const std::size_t batch = probs.size();
  require(batch > 0 && ttlc_pred.size() == batch && labels.size() == batch &&
              ttlc_true.size() == batch,
          ErrorKind::State, "mtl loss: batch size mismatch");
  Tensor<T> one_hot({batch, 3});
  Tensor<T> target({batch});
  Tensor<T> mask({batch});
  for (std::size_t i = 0; i < batch; ++i) {
    one_hot.data[i * 3 + static_cast<std::size_t>(labels[i])] = T{1};
    if (labels[i] != Label::LK && std::isfinite(ttlc_true[i])) {
      target.data[i] = static_cast<T>(ttlc_true[i]);
      mask.data[i] = T{1};
    }
  }
  BatchLossNodes<T> out;
  out.ce = tape.cross_entropy(tape.stack_rows(probs), std::move(one_hot));
  out.mse = tape.mse(tape.concat(ttlc_pred), std::move(target),
                     std::move(mask));
  out.total = tape.weighted_sum({out.ce, out.mse},
                                {T{1}, static_cast<T>(gamma)});
  return out;
}

// Inference result for one sample.
struct Prediction {
  std::array<double, 3> probs{};      // LK, RLC, LLC
  double ttlc = 0.0;                  // seconds
  std::array<double, 4> attention{};  // FR, FL, BR, BL
};

inline Prediction predict(const ParamStore<float>& params,
                          const QuadrantIndex& qi, const ModelConfig& cfg,
                          const BevStack& stack) {
  Tape<float> tape;
  ModelGraph<float> graph(tape, params, qi, cfg);
  const ModelOut<float> out = graph.forward(&stack, false);
  Prediction p;
  for (int k = 0; k < 3; ++k)
    p.probs[static_cast<std::size_t>(k)] =
        tape.value(out.probs).data[static_cast<std::size_t>(k)];
  p.ttlc = tape.value(out.ttlc).data[0];
  for (int k = 0; k < 4; ++k)
    p.attention[static_cast<std::size_t>(k)] =
        tape.value(out.alpha).data[static_cast<std::size_t>(k)];
  return p;
}

}  // namespace lcp
