#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "matchseg/data_io.hpp"
#include "matchseg/embedding.hpp"
#include "matchseg/losses.hpp"
#include "matchseg/rng.hpp"
#include "matchseg/segnet.hpp"

namespace matchseg {

enum class SelectionStrategy { clip, random };

SelectionStrategy strategy_from_string(const std::string& s);
std::string strategy_to_string(SelectionStrategy s);

struct TrainConfig {
    double learning_rate = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 1e-4;
    int steps = 0;
    int support_k = 8;
    SelectionStrategy selection_strategy = SelectionStrategy::clip;
    int image_size = 32; // paper-scale value is 160
    std::uint64_t seed = 0;
    bool augment = true;
    LossWeights loss_weights;
    NetworkConfig network;

    void validate() const;
};

// --- augmentation -------------------------------------------------------------
// Plain data transforms on (C,H,W) tensors; gradients are never recorded.

Tensor flip_h(const Tensor& chw);
Tensor flip_v(const Tensor& chw);
// Rotation about the image center, zero fill outside; bilinear sampling for
// images, nearest for masks.
Tensor rotate_chw(const Tensor& chw, double radians, bool nearest);
Tensor resize_nearest(const Tensor& chw, int out_h, int out_w);
Tensor crop(const Tensor& chw, int off_y, int off_x, int out_h, int out_w);
// Zero-pads symmetrically up to at least (out_h, out_w).
Tensor pad_center(const Tensor& chw, int out_h, int out_w);

// Random flips, rotation in [-30, 30] degrees, isotropic scale in [0.8, 1.2],
// then a random crop (after symmetric zero-padding if needed) back to the
// input size. Image and mask receive identical geometry; the image is
// clamped to [0,1] and the mask stays binary.
// Draw order: hflip, vflip, angle, scale, crop offsets (y then x).
void augment(Tensor& image, Tensor& mask, RngStream& rng);

// --- episode construction -------------------------------------------------------

// Supports come from the training split minus the query itself: ranked by
// embedding similarity for clip, uniform without replacement for random.
// Images are bilinear-resized and masks nearest-resized to image_size.
Episode build_episode(const Dataset& ds, const std::string& query_id, const EmbeddingIndex* index,
                      const TrainConfig& config, RngStream& rng);

// --- optimization ----------------------------------------------------------------

struct AdamWState {
    std::map<std::string, std::vector<float>> m, v;
    long step = 0;
};

// Decoupled-weight-decay Adam with bias correction:
// theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + weight_decay * theta).
// Reads gradients from the parameter tensors; a missing gradient is an error
// naming the tensor.
void adamw_step(ModelParams& params, AdamWState& state, const TrainConfig& config);

struct TrainResult {
    ModelParams params;
    std::vector<float> losses; // one entry per step
};

// Episodic training: per step sample a train query, build its episode,
// augment, forward, compound loss, backward, AdamW update with gradients
// zeroed between steps. Deterministic for a fixed seed. index may be null;
// one is built with the desk provider when the clip strategy needs it.
// log, when given, receives "step\tloss" lines.
TrainResult train(const Dataset& ds, const TrainConfig& config,
                  const EmbeddingIndex* index = nullptr, std::ostream* log = nullptr);

// --- evaluation -----------------------------------------------------------------

struct EvalReport {
    std::vector<MetricsRow> rows;                    // one row per test query
    std::vector<std::vector<MetricsRow>> per_repeat; // [query][repeat] detail
};

// Per test query: `repeats` support selections (clip is deterministic, so its
// repeats collapse to one); per repeat sigmoid probabilities and metrics at
// threshold 0.5. With ensemble=true the row holds metrics of the averaged
// probability map, otherwise the mean of the per-repeat metrics.
EvalReport evaluate(const ModelParams& params, const Dataset& ds, const TrainConfig& config,
                    int repeats, bool ensemble, const EmbeddingIndex* index = nullptr);

} // namespace matchseg
