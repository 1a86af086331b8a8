#include "matchseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace matchseg {

SelectionStrategy strategy_from_string(const std::string& s) {
    if (s == "clip") return SelectionStrategy::clip;
    if (s == "random") return SelectionStrategy::random;
    throw config_error("unknown selection strategy '" + s + "' (expected clip or random)");
}

std::string strategy_to_string(SelectionStrategy s) {
    return s == SelectionStrategy::clip ? "clip" : "random";
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw config_error("learning_rate must be positive");
    if (support_k < 1) throw config_error("support_k must be >= 1");
    if (steps < 0) throw config_error("steps must be >= 0");
    const int div = 1 << (network.levels - 1);
    if (image_size < div || image_size % div != 0)
        throw config_error("image_size " + std::to_string(image_size) +
                           " must be divisible by 2^(levels-1) = " + std::to_string(div));
    network.validate();
}

// --- augmentation primitives ---------------------------------------------------

namespace {

void check_chw(const Tensor& t, const char* op) {
    if (!t.defined() || t.rank() != 3) throw shape_error(std::string(op) + " expects (C,H,W)");
}

} // namespace

Tensor flip_h(const Tensor& chw) {
    check_chw(chw, "flip_h");
    const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    Tensor out = Tensor::zeros(chw.shape());
    const float* src = chw.values().data();
    float* dst = out.values_mut().data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                dst[(static_cast<std::size_t>(ch) * h + y) * w + x] =
                    src[(static_cast<std::size_t>(ch) * h + y) * w + (w - 1 - x)];
    return out;
}

Tensor flip_v(const Tensor& chw) {
    check_chw(chw, "flip_v");
    const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    Tensor out = Tensor::zeros(chw.shape());
    const float* src = chw.values().data();
    float* dst = out.values_mut().data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            std::copy(src + (static_cast<std::size_t>(ch) * h + (h - 1 - y)) * w,
                      src + (static_cast<std::size_t>(ch) * h + (h - y)) * w,
                      dst + (static_cast<std::size_t>(ch) * h + y) * w);
    return out;
}

Tensor rotate_chw(const Tensor& chw, double radians, bool nearest) {
    check_chw(chw, "rotate_chw");
    const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    const double cy = h / 2.0, cx = w / 2.0;
    const double cosr = std::cos(radians), sinr = std::sin(radians);
    Tensor out = Tensor::zeros(chw.shape());
    const float* src = chw.values().data();
    float* dst = out.values_mut().data();
    for (int y = 0; y < h; ++y) {
        const double py = y + 0.5 - cy;
        for (int x = 0; x < w; ++x) {
            const double px = x + 0.5 - cx;
            // inverse mapping: rotate the output pixel center back by -radians
            const double sx = cx + px * cosr + py * sinr - 0.5;
            const double sy = cy - px * sinr + py * cosr - 0.5;
            for (int ch = 0; ch < c; ++ch) {
                const float* plane = src + static_cast<std::size_t>(ch) * h * w;
                float v = 0.0f;
                if (nearest) {
                    const long ix = std::lround(sx), iy = std::lround(sy);
                    if (ix >= 0 && ix < w && iy >= 0 && iy < h)
                        v = plane[static_cast<std::size_t>(iy) * w + ix];
                } else {
                    const int x0 = static_cast<int>(std::floor(sx));
                    const int y0 = static_cast<int>(std::floor(sy));
                    const double wx = sx - x0, wy = sy - y0;
                    double acc = 0.0;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const int xx = x0 + dx, yy = y0 + dy;
                            if (xx < 0 || xx >= w || yy < 0 || yy >= h) continue;
                            const double wgt = (dx ? wx : 1 - wx) * (dy ? wy : 1 - wy);
                            acc += wgt * plane[static_cast<std::size_t>(yy) * w + xx];
                        }
                    v = static_cast<float>(acc);
                }
                dst[(static_cast<std::size_t>(ch) * h + y) * w + x] = v;
            }
        }
    }
    return out;
}

Tensor resize_nearest(const Tensor& chw, int out_h, int out_w) {
    check_chw(chw, "resize_nearest");
    if (out_h < 1 || out_w < 1) throw shape_error("resize_nearest output sizes must be >= 1");
    const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    Tensor out = Tensor::zeros({c, out_h, out_w});
    const float* src = chw.values().data();
    float* dst = out.values_mut().data();
    for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(h - 1, static_cast<int>((y + 0.5) * h / out_h));
        for (int x = 0; x < out_w; ++x) {
            const int sx = std::min(w - 1, static_cast<int>((x + 0.5) * w / out_w));
            for (int ch = 0; ch < c; ++ch)
                dst[(static_cast<std::size_t>(ch) * out_h + y) * out_w + x] =
                    src[(static_cast<std::size_t>(ch) * h + sy) * w + sx];
        }
    }
    return out;
}

Tensor crop(const Tensor& chw, int off_y, int off_x, int out_h, int out_w) {
    check_chw(chw, "crop");
    const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    if (off_y < 0 || off_x < 0 || off_y + out_h > h || off_x + out_w > w)
        throw shape_error("crop window exceeds source bounds");
    Tensor out = Tensor::zeros({c, out_h, out_w});
    const float* src = chw.values().data();
    float* dst = out.values_mut().data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < out_h; ++y)
            std::copy(src + (static_cast<std::size_t>(ch) * h + off_y + y) * w + off_x,
                      src + (static_cast<std::size_t>(ch) * h + off_y + y) * w + off_x + out_w,
                      dst + (static_cast<std::size_t>(ch) * out_h + y) * out_w);
    return out;
}

Tensor pad_center(const Tensor& chw, int out_h, int out_w) {
    check_chw(chw, "pad_center");
    const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    const int ph = std::max(h, out_h), pw = std::max(w, out_w);
    if (ph == h && pw == w) return chw;
    Tensor out = Tensor::zeros({c, ph, pw});
    const int oy = (ph - h) / 2, ox = (pw - w) / 2;
    const float* src = chw.values().data();
    float* dst = out.values_mut().data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            std::copy(src + (static_cast<std::size_t>(ch) * h + y) * w,
                      src + (static_cast<std::size_t>(ch) * h + y + 1) * w,
                      dst + (static_cast<std::size_t>(ch) * ph + oy + y) * pw + ox);
    return out;
}

namespace {

Tensor clamp01(const Tensor& chw) {
    Tensor out = Tensor::zeros(chw.shape());
    const float* src = chw.values().data();
    float* dst = out.values_mut().data();
    for (std::size_t i = 0; i < chw.numel(); ++i) dst[i] = std::clamp(src[i], 0.0f, 1.0f);
    return out;
}

} // namespace

void augment(Tensor& image, Tensor& mask, RngStream& rng) {
    check_chw(image, "augment");
    check_chw(mask, "augment");
    const int h = image.dim(1), w = image.dim(2);
    constexpr double kDeg = 3.141592653589793 / 180.0;

    if (rng.bernoulli(0.5)) {
        image = flip_h(image);
        mask = flip_h(mask);
    }
    if (rng.bernoulli(0.5)) {
        image = flip_v(image);
        mask = flip_v(mask);
    }
    const double angle = rng.uniform(-30.0 * kDeg, 30.0 * kDeg);
    image = rotate_chw(image, angle, /*nearest=*/false);
    mask = rotate_chw(mask, angle, /*nearest=*/true);

    const double s = rng.uniform(0.8, 1.2);
    const int nh = std::max(1, static_cast<int>(std::lround(s * h)));
    const int nw = std::max(1, static_cast<int>(std::lround(s * w)));
    image = bilinear_resize(image, nh, nw);
    mask = resize_nearest(mask, nh, nw);

    image = pad_center(image, h, w);
    mask = pad_center(mask, h, w);
    const int slack_y = image.dim(1) - h, slack_x = image.dim(2) - w;
    const int oy = slack_y > 0 ? static_cast<int>(rng.uniform_int(slack_y + 1)) : 0;
    const int ox = slack_x > 0 ? static_cast<int>(rng.uniform_int(slack_x + 1)) : 0;
    image = crop(image, oy, ox, h, w);
    mask = crop(mask, oy, ox, h, w);

    image = clamp01(image);
}

// --- episode construction -----------------------------------------------------------

namespace {

std::pair<Tensor, Tensor> load_resized(const DatasetItem& item, int size) {
    Tensor image = item.image;
    Tensor mask = item.mask;
    if (image.dim(1) != size || image.dim(2) != size) {
        image = bilinear_resize(image, size, size);
        mask = resize_nearest(mask, size, size);
    }
    return {image, mask};
}

std::vector<std::string> pick_support_ids(const Dataset& ds, const std::string& query_id,
                                          const EmbeddingIndex* index, const TrainConfig& config,
                                          RngStream& rng) {
    std::vector<std::string> pool;
    for (const DatasetItem& item : ds.items())
        if (item.split == "train" && item.id != query_id) pool.push_back(item.id);
    if (static_cast<int>(pool.size()) < config.support_k)
        throw value_error("support pool has " + std::to_string(pool.size()) +
                          " items, need K = " + std::to_string(config.support_k));

    if (config.selection_strategy == SelectionStrategy::random) {
        // partial Fisher-Yates: first K entries are a uniform sample without replacement
        for (int i = 0; i < config.support_k; ++i) {
            const std::size_t j =
                static_cast<std::size_t>(i) + rng.uniform_int(pool.size() - static_cast<std::size_t>(i));
            std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
        }
        pool.resize(static_cast<std::size_t>(config.support_k));
        return pool;
    }

    if (!index) throw config_error("clip strategy requires an embedding index");
    const EmbeddingRecord* query_rec = index->find(query_id);
    if (!query_rec) throw value_error("query id '" + query_id + "' is not in the embedding index");
    std::unordered_set<std::string> exclude{query_id};
    for (const DatasetItem& item : ds.items())
        if (item.split != "train") exclude.insert(item.id);
    std::vector<SimilarityHit> hits =
        select_top_k(query_rec->vector, *index, config.support_k, exclude);
    std::vector<std::string> ids;
    ids.reserve(hits.size());
    for (const SimilarityHit& hit : hits) ids.push_back(hit.id);
    return ids;
}

} // namespace

Episode build_episode(const Dataset& ds, const std::string& query_id, const EmbeddingIndex* index,
                      const TrainConfig& config, RngStream& rng) {
    const DatasetItem& query = ds.at(query_id);
    Episode ep;
    ep.query_id = query_id;
    auto [qi, qm] = load_resized(query, config.image_size);
    ep.query_image = qi;
    ep.query_mask = qm;
    for (const std::string& id : pick_support_ids(ds, query_id, index, config, rng)) {
        auto [si, sm] = load_resized(ds.at(id), config.image_size);
        ep.supports.push_back({si, sm});
    }
    return ep;
}

// --- AdamW ---------------------------------------------------------------------------

void adamw_step(ModelParams& params, AdamWState& state, const TrainConfig& config) {
    state.step += 1;
    const double b1 = config.adam_beta1, b2 = config.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (auto& [name, tensor] : params.tensors) {
        if (!tensor.requires_grad()) continue;
        if (!tensor.has_grad())
            throw value_error("adamw_step: missing gradient for tensor '" + name + "'");
        std::vector<float>& m = state.m[name];
        std::vector<float>& v = state.v[name];
        if (m.empty()) m.assign(tensor.numel(), 0.0f);
        if (v.empty()) v.assign(tensor.numel(), 0.0f);
        std::span<const float> g = tensor.grad();
        std::span<float> theta = tensor.values_mut();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = g[i];
            const double mi = b1 * m[i] + (1.0 - b1) * gi;
            const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            theta[i] = static_cast<float>(
                theta[i] - config.learning_rate *
                               (mhat / (std::sqrt(vhat) + config.adam_eps) +
                                config.weight_decay * theta[i]));
        }
    }
}

// --- training --------------------------------------------------------------------------

TrainResult train(const Dataset& ds, const TrainConfig& config, const EmbeddingIndex* index,
                  std::ostream* log) {
    config.validate();
    const std::vector<std::string> train_ids = [&] {
        std::vector<std::string> ids;
        for (const DatasetItem& item : ds.items())
            if (item.split == "train") ids.push_back(item.id);
        return ids;
    }();
    if (train_ids.empty()) throw value_error("train: dataset has no train split");

    EmbeddingIndex fallback_index(1, "unused");
    if (config.selection_strategy == SelectionStrategy::clip && !index) {
        fallback_index = build_index(ds, "desk");
        index = &fallback_index;
    }

    TrainResult result;
    result.params = init_params(config.network, config.seed);
    AdamWState state;
    RngStream rng(RngStream::mix(config.seed, 0x7ea1ull));

    char line[64];
    for (int step = 1; step <= config.steps; ++step) {
        const std::string& query_id = train_ids[rng.uniform_int(train_ids.size())];
        Episode ep = build_episode(ds, query_id, index, config, rng);
        if (config.augment) {
            augment(ep.query_image, ep.query_mask, rng);
            for (SupportPair& sp : ep.supports) augment(sp.image, sp.mask, rng);
        }

        Tape tape;
        Tensor loss;
        {
            TapeScope scope(tape);
            Tensor logits = forward(ep, result.params, config.network);
            loss = total_loss(sigmoid(logits), ep.query_mask, config.loss_weights);
            if (!std::isfinite(loss.item()))
                throw value_error("training diverged: non-finite loss at step " +
                                  std::to_string(step));
            backward(loss, tape);
        }
        adamw_step(result.params, state, config);
        result.params.zero_grads();
        result.losses.push_back(loss.item());
        if (log) {
            std::snprintf(line, sizeof(line), "%d\t%.6f", step, static_cast<double>(loss.item()));
            *log << line << '\n';
        }
    }
    return result;
}

// --- evaluation ----------------------------------------------------------------------------

EvalReport evaluate(const ModelParams& params, const Dataset& ds, const TrainConfig& config,
                    int repeats, bool ensemble, const EmbeddingIndex* index) {
    config.validate();
    if (repeats < 1) throw config_error("evaluate requires repeats >= 1");
    const std::vector<std::string> test_ids = ds.split_ids("test");
    if (test_ids.empty()) throw value_error("evaluate: dataset has no test split");

    EmbeddingIndex fallback_index(1, "unused");
    if (config.selection_strategy == SelectionStrategy::clip && !index) {
        fallback_index = build_index(ds, "desk");
        index = &fallback_index;
    }
    // clip selection is deterministic, repeats collapse to one
    const int effective_repeats =
        config.selection_strategy == SelectionStrategy::clip ? 1 : repeats;

    EvalReport report;
    for (std::size_t qi = 0; qi < test_ids.size(); ++qi) {
        const std::string& query_id = test_ids[qi];
        std::vector<MetricsRow> repeat_rows;
        Tensor prob_sum;
        Tensor target;
        for (int r = 0; r < effective_repeats; ++r) {
            RngStream rng(RngStream::mix(config.seed, qi, static_cast<std::uint64_t>(r)));
            Episode ep = build_episode(ds, query_id, index, config, rng);
            target = ep.query_mask;
            Tensor probs = sigmoid(forward(ep, params, config.network));
            if (!prob_sum.defined()) prob_sum = probs;
            else prob_sum = add(prob_sum, probs);
            Tensor pred = binarize(probs, 0.5f);
            repeat_rows.push_back({query_id, dsc_metric(pred, target), iou_metric(pred, target)});
        }
        MetricsRow row{query_id, 0.0, 0.0};
        if (ensemble) {
            Tensor avg = scale(prob_sum, 1.0f / static_cast<float>(effective_repeats));
            Tensor pred = binarize(avg, 0.5f);
            row.dsc = dsc_metric(pred, target);
            row.iou = iou_metric(pred, target);
        } else {
            for (const MetricsRow& rr : repeat_rows) {
                row.dsc += rr.dsc;
                row.iou += rr.iou;
            }
            row.dsc /= repeat_rows.size();
            row.iou /= repeat_rows.size();
        }
        report.rows.push_back(row);
        report.per_repeat.push_back(std::move(repeat_rows));
    }
    return report;
}

} // namespace matchseg
