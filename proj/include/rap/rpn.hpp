#pragma once

// A small class-agnostic Region Proposal Network: anchor grid, convolutional
// backbone, 1x1 objectness and offset heads, box coding, training, and the
// checkpoint container.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rap/binary_io.hpp"
#include "rap/box.hpp"
#include "rap/numerics.hpp"
#include "rap/random.hpp"
#include "rap/scenes.hpp"

namespace rap {

// ---------------------------------------------------------------------------
// Anchors and box coding

struct AnchorConfig {
    std::size_t stride = 8;
    std::vector<double> scales{16.0, 32.0};
    /// height / width
    std::vector<double> ratios{1.0, 2.0};

    std::size_t per_cell() const { return scales.size() * ratios.size(); }

    void validate() const {
        if (stride == 0) throw std::invalid_argument("anchor config: stride must be positive");
        if (scales.empty() || ratios.empty()) throw std::invalid_argument("anchor config: empty scales or ratios");
        for (double v : scales) {
            if (!(v > 0.0)) throw std::invalid_argument("anchor config: scales must be positive");
        }
        for (double v : ratios) {
            if (!(v > 0.0)) throw std::invalid_argument("anchor config: ratios must be positive");
        }
    }

    friend bool operator==(const AnchorConfig&, const AnchorConfig&) = default;
};

/// H*W*A anchors ordered row-major by cell, then scale, then ratio.
inline std::vector<Box> generate_anchors(const AnchorConfig& cfg, std::size_t feature_height,
                                         std::size_t feature_width) {
    cfg.validate();
    std::vector<Box> out;
    out.reserve(feature_height * feature_width * cfg.per_cell());
    const double s = static_cast<double>(cfg.stride);
    for (std::size_t r = 0; r < feature_height; ++r) {
        for (std::size_t c = 0; c < feature_width; ++c) {
            for (double scale : cfg.scales) {
                for (double ratio : cfg.ratios) {
                    double root = std::sqrt(ratio);
                    out.push_back(Box{(c + 0.5) * s, (r + 0.5) * s, scale / root, scale * root});
                }
            }
        }
    }
    return out;
}

struct Offsets {
    double dx = 0.0;
    double dy = 0.0;
    double dw = 0.0;
    double dh = 0.0;
};

/// Largest log-scale applied when decoding; keeps attacked offsets finite.
inline constexpr double kMaxLogScale = 8.0;

inline Box decode_box(const Box& anchor, const Offsets& d) {
    return Box{anchor.x + d.dx * anchor.w, anchor.y + d.dy * anchor.h,
               anchor.w * std::exp(std::min(d.dw, kMaxLogScale)),
               anchor.h * std::exp(std::min(d.dh, kMaxLogScale))};
}

/// Inverse of decode_box (within the unclamped range).
inline Offsets encode_box(const Box& anchor, const Box& target) {
    return Offsets{(target.x - anchor.x) / anchor.w, (target.y - anchor.y) / anchor.h,
                   std::log(target.w / anchor.w), std::log(target.h / anchor.h)};
}

struct Proposal {
    double score = 0.0;
    Offsets offsets;
    Box anchor;
    Box decoded;
};

// ---------------------------------------------------------------------------
// Model

struct ArchitectureDescriptor {
    std::string name = "rpn";
    std::size_t depth = 3;
    std::size_t width = 16;
    std::size_t kernel = 5;
    std::uint64_t seed = 1;
    std::size_t input_height = 64;
    std::size_t input_width = 64;
    AnchorConfig anchors;
    /// Explicit max-pool windows per layer; empty selects the default schedule.
    std::vector<std::size_t> pools;

    /// Max-pool window after each backbone layer; their product is the anchor
    /// stride. Downsampling is front-loaded when there are fewer layers than
    /// factors of two.
    std::vector<std::size_t> pool_factors() const {
        if (!pools.empty()) {
            std::size_t prod = 1;
            for (auto p : pools) prod *= p;
            if (pools.size() != depth || prod != anchors.stride) {
                throw std::invalid_argument("descriptor: pools must have one entry per layer with product = stride");
            }
            return pools;
        }
        std::size_t stride = anchors.stride;
        std::size_t twos = 0;
        while (stride % 2 == 0 && stride > 1) {
            stride /= 2;
            ++twos;
        }
        if (stride != 1) throw std::invalid_argument("descriptor: anchor stride must be a power of two");
        std::vector<std::size_t> pools(depth, 1);
        if (depth == 0) return pools;
        std::size_t extra = twos > depth ? twos - depth : 0;
        for (std::size_t i = 0; i < depth && i < twos; ++i) pools[i] = 2;
        pools[0] <<= extra;
        return pools;
    }

    void validate() const {
        anchors.validate();
        if (depth == 0 || width == 0) throw std::invalid_argument("descriptor: depth and width must be positive");
        if (kernel == 0 || kernel % 2 == 0) throw std::invalid_argument("descriptor: kernel must be odd");
        pool_factors();
        if (input_height % anchors.stride != 0 || input_width % anchors.stride != 0) {
            throw std::invalid_argument("descriptor: input size not divisible by stride");
        }
    }

    nlohmann::json to_json() const {
        return {{"name", name},
                {"depth", depth},
                {"width", width},
                {"kernel", kernel},
                {"seed", seed},
                {"input_height", input_height},
                {"input_width", input_width},
                {"pools", pools},
                {"anchors", {{"stride", anchors.stride}, {"scales", anchors.scales}, {"ratios", anchors.ratios}}}};
    }

    static ArchitectureDescriptor from_json(const nlohmann::json& j) {
        ArchitectureDescriptor d;
        d.name = j.at("name").get<std::string>();
        d.depth = j.at("depth").get<std::size_t>();
        d.width = j.at("width").get<std::size_t>();
        d.kernel = j.value("kernel", d.kernel);
        d.seed = j.at("seed").get<std::uint64_t>();
        d.input_height = j.value("input_height", d.input_height);
        d.input_width = j.value("input_width", d.input_width);
        d.pools = j.value("pools", d.pools);
        if (j.contains("anchors")) {
            const auto& a = j["anchors"];
            d.anchors.stride = a.at("stride").get<std::size_t>();
            d.anchors.scales = a.at("scales").get<std::vector<double>>();
            d.anchors.ratios = a.at("ratios").get<std::vector<double>>();
        }
        d.validate();
        return d;
    }

    friend bool operator==(const ArchitectureDescriptor&, const ArchitectureDescriptor&) = default;
};

struct NamedTensor {
    std::string name;
    ad::Tensor value;
};

struct RpnModel {
    ArchitectureDescriptor descriptor;
    std::vector<NamedTensor> parameters;

    const ad::Tensor& parameter(const std::string& name) const {
        for (const auto& p : parameters) {
            if (p.name == name) return p.value;
        }
        throw std::out_of_range("model has no parameter " + name);
    }
};

/// Parameters initialized from the descriptor seed (He-normal convolutions,
/// small head weights, negative objectness prior).
inline RpnModel make_model(const ArchitectureDescriptor& desc) {
    desc.validate();
    RpnModel model{desc, {}};
    KeyedRng rng{0x52504e4dULL, desc.seed};
    auto normal = [&](ad::Shape shape, double stddev) {
        std::vector<double> v(ad::element_count(shape));
        for (double& x : v) x = stddev * rng.normal();
        return ad::Tensor(std::move(shape), std::move(v));
    };
    std::size_t in = Image::channels;
    const std::size_t k = desc.kernel;
    for (std::size_t i = 0; i < desc.depth; ++i) {
        double fan_in = static_cast<double>(in * k * k);
        std::string prefix = "backbone." + std::to_string(i);
        model.parameters.push_back({prefix + ".weight", normal({desc.width, in, k, k}, std::sqrt(2.0 / fan_in))});
        model.parameters.push_back({prefix + ".bias", ad::Tensor::zeros({desc.width})});
        in = desc.width;
    }
    const std::size_t A = desc.anchors.per_cell();
    model.parameters.push_back({"objectness.weight", normal({A, in, 1, 1}, 0.01)});
    model.parameters.push_back({"objectness.bias", ad::Tensor::full({A}, -2.0)});
    model.parameters.push_back({"offsets.weight", normal({4 * A, in, 1, 1}, 0.01)});
    model.parameters.push_back({"offsets.bias", ad::Tensor::zeros({4 * A})});
    return model;
}

inline RpnModel zero_model(const ArchitectureDescriptor& desc) {
    RpnModel m = make_model(desc);
    for (auto& p : m.parameters) p.value = ad::Tensor::zeros(p.value.shape());
    return m;
}

/// Image as a [3,H,W] tensor (planar channels).
inline ad::Tensor image_tensor(const Image& img) {
    std::vector<double> v(img.pixels.size());
    const std::size_t plane = img.height * img.width;
    for (std::size_t i = 0; i < plane; ++i) {
        for (std::size_t c = 0; c < Image::channels; ++c) {
            v[c * plane + i] = img.pixels[i * Image::channels + c];
        }
    }
    return ad::Tensor({Image::channels, img.height, img.width}, std::move(v));
}

/// Planar [3,H,W] values back to channel-interleaved layout.
inline std::vector<double> interleave_channels(std::span<const double> planar, std::size_t height,
                                               std::size_t width) {
    std::vector<double> out(planar.size());
    const std::size_t plane = height * width;
    for (std::size_t i = 0; i < plane; ++i) {
        for (std::size_t c = 0; c < Image::channels; ++c) {
            out[i * Image::channels + c] = planar[c * plane + i];
        }
    }
    return out;
}

/// Raw network outputs for one image plus the anchor grid they refer to.
/// Proposal j = (r*fw + c)*A + a reads objectness channel a and offset
/// channels 4a..4a+3 at cell (r, c).
struct ProposalSet {
    ad::Tensor logits;   // [A, fh, fw]
    ad::Tensor scores;   // sigmoid(logits)
    ad::Tensor offsets;  // [4A, fh, fw]
    std::size_t feature_height = 0;
    std::size_t feature_width = 0;
    std::size_t per_cell = 0;
    std::vector<Box> anchors;

    std::size_t size() const { return anchors.size(); }

    std::size_t score_index(std::size_t j) const {
        std::size_t cell = j / per_cell, a = j % per_cell;
        return a * feature_height * feature_width + cell;
    }

    std::size_t offset_index(std::size_t j, std::size_t k) const {
        std::size_t cell = j / per_cell, a = j % per_cell;
        return (4 * a + k) * feature_height * feature_width + cell;
    }

    double score(std::size_t j) const { return scores[score_index(j)]; }

    Offsets offset(std::size_t j) const {
        return Offsets{offsets[offset_index(j, 0)], offsets[offset_index(j, 1)], offsets[offset_index(j, 2)],
                       offsets[offset_index(j, 3)]};
    }

    Proposal proposal(std::size_t j) const {
        Offsets d = offset(j);
        return Proposal{score(j), d, anchors[j], decode_box(anchors[j], d)};
    }

    std::vector<Proposal> proposals() const {
        std::vector<Proposal> out;
        out.reserve(size());
        for (std::size_t j = 0; j < size(); ++j) out.push_back(proposal(j));
        return out;
    }

    /// Mask over the score tensor selecting the given proposals.
    ad::Mask score_mask(const std::vector<std::uint8_t>& per_proposal) const {
        ad::Mask m(scores.size(), 0);
        for (std::size_t j = 0; j < size(); ++j) {
            if (per_proposal[j]) m[score_index(j)] = 1;
        }
        return m;
    }

    /// Mask over the offset tensor selecting all four offsets of the given proposals.
    ad::Mask offset_mask(const std::vector<std::uint8_t>& per_proposal) const {
        ad::Mask m(offsets.size(), 0);
        for (std::size_t j = 0; j < size(); ++j) {
            if (!per_proposal[j]) continue;
            for (std::size_t k = 0; k < 4; ++k) m[offset_index(j, k)] = 1;
        }
        return m;
    }
};

/// Forward pass with an explicit parameter list (ordered as in RpnModel), so
/// training can pass tape-tracked parameters.
inline ProposalSet forward_with(const ArchitectureDescriptor& desc, std::span<const ad::Tensor> params,
                                const ad::Tensor& image) {
    const auto& s = image.shape();
    const std::size_t stride = desc.anchors.stride;
    if (s.size() != 3 || s[0] != Image::channels) {
        throw std::invalid_argument("rpn forward: expected a [3,H,W] image, got " + ad::shape_string(s));
    }
    if (s[1] % stride != 0 || s[2] % stride != 0) {
        throw std::invalid_argument("rpn forward: image " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                                    " not divisible by stride " + std::to_string(stride));
    }
    if (params.size() != 2 * desc.depth + 4) {
        throw std::invalid_argument("rpn forward: parameter count does not match descriptor");
    }
    auto pools = desc.pool_factors();
    const ad::Conv2dOptions same{1, desc.kernel / 2};
    ad::Tensor x = ad::add_scalar(ad::scale(image, 1.0 / 255.0), -0.5);
    for (std::size_t i = 0; i < desc.depth; ++i) {
        x = ad::relu(ad::conv2d(x, params[2 * i], params[2 * i + 1], same));
        if (pools[i] > 1) x = ad::max_pool2d(x, pools[i]);
    }
    const std::size_t h = desc.depth * 2;
    ProposalSet out;
    out.logits = ad::conv2d(x, params[h], params[h + 1]);
    out.scores = ad::sigmoid(out.logits);
    out.offsets = ad::conv2d(x, params[h + 2], params[h + 3]);
    out.feature_height = s[1] / stride;
    out.feature_width = s[2] / stride;
    out.per_cell = desc.anchors.per_cell();
    out.anchors = generate_anchors(desc.anchors, out.feature_height, out.feature_width);
    return out;
}

inline std::vector<ad::Tensor> parameter_values(const RpnModel& model) {
    std::vector<ad::Tensor> v;
    v.reserve(model.parameters.size());
    for (const auto& p : model.parameters) v.push_back(p.value);
    return v;
}

inline ProposalSet forward(const RpnModel& model, const ad::Tensor& image) {
    auto params = parameter_values(model);
    return forward_with(model.descriptor, params, image);
}

inline ProposalSet forward(const RpnModel& model, const Image& image) {
    return forward(model, image_tensor(image));
}

// ---------------------------------------------------------------------------
// Training

inline double box_iou(const Box& a, const Box& b) {
    double iw = std::min(a.right(), b.right()) - std::max(a.left(), b.left());
    double ih = std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top());
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    double inter = iw * ih;
    double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

struct AnchorAssignment {
    /// 1 positive, 0 negative, -1 ignored.
    std::vector<int> labels;
    /// Index of the best-overlapping truth box (meaningful for positives).
    std::vector<std::size_t> matched;
    /// Best IoU of each anchor with any truth box.
    std::vector<double> best_iou;
};

/// Positives: IoU > positive_iou with some truth, or the best anchor(s) for a
/// truth. Negatives: max IoU < negative_iou and not positive.
inline AnchorAssignment assign_anchors(const std::vector<Box>& anchors, const GroundTruth& truth,
                                       double positive_iou = 0.7, double negative_iou = 0.3) {
    AnchorAssignment out{std::vector<int>(anchors.size(), -1), std::vector<std::size_t>(anchors.size(), 0), {}};
    std::vector<double> best_for_truth(truth.boxes.size(), 0.0);
    std::vector<double> best(anchors.size(), 0.0);
    std::vector<std::vector<double>> iou(anchors.size(), std::vector<double>(truth.boxes.size()));
    for (std::size_t j = 0; j < anchors.size(); ++j) {
        for (std::size_t i = 0; i < truth.boxes.size(); ++i) {
            double v = box_iou(anchors[j], truth.boxes[i]);
            iou[j][i] = v;
            if (v > best[j]) {
                best[j] = v;
                out.matched[j] = i;
            }
            best_for_truth[i] = std::max(best_for_truth[i], v);
        }
    }
    out.best_iou = best;
    for (std::size_t j = 0; j < anchors.size(); ++j) {
        if (best[j] < negative_iou) out.labels[j] = 0;
        if (best[j] > positive_iou) out.labels[j] = 1;
        for (std::size_t i = 0; i < truth.boxes.size(); ++i) {
            if (best_for_truth[i] > 0.0 && iou[j][i] == best_for_truth[i]) {
                out.labels[j] = 1;
                out.matched[j] = i;
            }
        }
    }
    return out;
}

struct TrainingConfig {
    std::size_t epochs = 20;
    double learning_rate = 0.01;
    double momentum = 0.9;
    /// Anchors sampled per image, at most half of them positive.
    std::size_t samples_per_image = 64;
    double positive_iou = 0.7;
    double negative_iou = 0.3;
    double smooth_l1_beta = 1.0 / 9.0;
    /// Anchors left unlabeled by the objectness rule still get regression
    /// targets when their best IoU reaches this value.
    double regression_iou = 0.3;
    /// Global gradient-norm cap per step.
    double max_grad_norm = 10.0;
    /// Cosine-anneal the learning rate from its initial value towards zero
    /// across the epochs.
    bool cosine_decay = true;

    double rate_at(std::size_t epoch) const {
        if (!cosine_decay || epochs == 0) return learning_rate;
        return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                                                     static_cast<double>(epochs)));
    }

    void validate() const {
        if (!(learning_rate > 0.0)) throw std::invalid_argument("training: learning rate must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("training: momentum must lie in [0,1)");
        if (samples_per_image < 2) throw std::invalid_argument("training: need at least 2 samples per image");
        if (!(negative_iou <= positive_iou)) throw std::invalid_argument("training: negative_iou > positive_iou");
    }
};

struct TrainingResult {
    RpnModel model;
    /// Mean per-image loss of each epoch.
    std::vector<double> loss_history;
    std::size_t skipped_images = 0;
};

namespace detail {

/// Sampled objectness + regression loss for one image.
inline ad::Tensor rpn_training_loss(const ProposalSet& ps, const AnchorAssignment& assign, const GroundTruth& truth,
                                    const TrainingConfig& cfg, KeyedRng& rng) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t j = 0; j < assign.labels.size(); ++j) {
        if (assign.labels[j] == 1) pos.push_back(j);
        if (assign.labels[j] == 0) neg.push_back(j);
    }
    rng.shuffle(pos);
    rng.shuffle(neg);
    pos.resize(std::min(pos.size(), cfg.samples_per_image / 2));
    neg.resize(std::min(neg.size(), cfg.samples_per_image - pos.size()));

    std::vector<std::uint8_t> pos_sel(ps.size(), 0), neg_sel(ps.size(), 0), reg_sel(ps.size(), 0);
    for (auto j : pos) pos_sel[j] = 1;
    for (auto j : neg) neg_sel[j] = 1;
    std::size_t n_reg = 0;
    for (std::size_t j = 0; j < ps.size(); ++j) {
        if (pos_sel[j] || (assign.labels[j] == -1 && assign.best_iou[j] >= cfg.regression_iou)) {
            reg_sel[j] = 1;
            ++n_reg;
        }
    }

    // BCE with logits: positives -log s = softplus(-x), negatives -log(1-s) = softplus(x).
    ad::Tensor loss = ad::Tensor::scalar(0.0);
    if (!pos.empty()) {
        auto x = ad::masked_select(ps.logits, ps.score_mask(pos_sel));
        loss = ad::add(loss, ad::scale(ad::sum(ad::softplus(ad::scale(x, -1.0))),
                                       1.0 / static_cast<double>(pos.size())));
    }
    if (n_reg > 0) {
        auto off = ad::masked_select(ps.offsets, ps.offset_mask(reg_sel));
        // Targets in the same order as masked_select: offset channel-major, then cell.
        std::vector<double> target(off.size());
        std::size_t k = 0;
        for (std::size_t idx = 0; idx < ps.offsets.size(); ++idx) {
            // Invert offset_index for selected entries.
            std::size_t plane = ps.feature_height * ps.feature_width;
            std::size_t ch = idx / plane, cell = idx % plane;
            std::size_t a = ch / 4, comp = ch % 4;
            std::size_t j = cell * ps.per_cell + a;
            if (!reg_sel[j]) continue;
            Offsets t = encode_box(ps.anchors[j], truth.boxes[assign.matched[j]]);
            target[k++] = comp == 0 ? t.dx : comp == 1 ? t.dy : comp == 2 ? t.dw : t.dh;
        }
        auto diff = ad::sub(off, ad::Tensor(off.shape(), std::move(target)));
        loss = ad::add(loss, ad::scale(ad::sum(ad::smooth_l1(diff, cfg.smooth_l1_beta)),
                                       1.0 / static_cast<double>(n_reg)));
    }
    if (!neg.empty()) {
        auto x = ad::masked_select(ps.logits, ps.score_mask(neg_sel));
        loss = ad::add(loss, ad::scale(ad::sum(ad::softplus(x)), 1.0 / static_cast<double>(neg.size())));
    }
    return loss;
}

}  // namespace detail

/// Per-image SGD with momentum. Images without ground truth are skipped.
inline TrainingResult train_rpn(RpnModel model, const std::vector<Scene>& dataset, const TrainingConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("train_rpn: empty dataset");
    cfg.validate();
    TrainingResult result;
    const auto& desc = model.descriptor;

    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (dataset[i].truth.boxes.empty()) {
            std::clog << "warning: train_rpn skips scene " << dataset[i].id << " (no ground-truth boxes)\n";
            ++result.skipped_images;
            continue;
        }
        usable.push_back(i);
    }

    std::vector<ad::Tensor> params = parameter_values(model);
    std::vector<std::vector<double>> velocity;
    for (const auto& p : params) velocity.emplace_back(p.size(), 0.0);

    const std::size_t fh = desc.input_height / desc.anchors.stride;
    const std::size_t fw = desc.input_width / desc.anchors.stride;
    auto anchors = generate_anchors(desc.anchors, fh, fw);
    std::vector<AnchorAssignment> assignments;
    std::vector<ad::Tensor> inputs;
    for (auto i : usable) {
        assignments.push_back(assign_anchors(anchors, dataset[i].truth, cfg.positive_iou, cfg.negative_iou));
        inputs.push_back(image_tensor(dataset[i].image));
    }

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        KeyedRng rng{0x54524149ULL, desc.seed, epoch};
        std::vector<std::size_t> order(usable.size());
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        rng.shuffle(order);
        double total = 0.0;
        const double rate = cfg.rate_at(epoch);
        for (auto k : order) {
            ad::Tape tape;
            std::vector<ad::Tensor> leaves;
            leaves.reserve(params.size());
            for (const auto& p : params) leaves.push_back(tape.variable(p));
            ProposalSet ps = forward_with(desc, leaves, inputs[k]);
            ad::Tensor loss = detail::rpn_training_loss(ps, assignments[k], dataset[usable[k]].truth, cfg, rng);
            total += loss.item();
            auto grads = tape.backward(loss);

            std::vector<ad::Tensor> g;
            double norm2 = 0.0;
            for (const auto& leaf : leaves) {
                g.push_back(grads.wrt(leaf));
                for (double v : g.back().values()) norm2 += v * v;
            }
            double clip = std::sqrt(norm2) > cfg.max_grad_norm ? cfg.max_grad_norm / std::sqrt(norm2) : 1.0;
            for (std::size_t p = 0; p < params.size(); ++p) {
                std::vector<double> next(params[p].values().begin(), params[p].values().end());
                auto& vel = velocity[p];
                for (std::size_t i = 0; i < next.size(); ++i) {
                    vel[i] = cfg.momentum * vel[i] + clip * g[p][i];
                    next[i] -= rate * vel[i];
                }
                params[p] = ad::Tensor(params[p].shape(), std::move(next));
            }
        }
        result.loss_history.push_back(usable.empty() ? 0.0 : total / static_cast<double>(usable.size()));
    }
    for (std::size_t p = 0; p < params.size(); ++p) model.parameters[p].value = params[p];
    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: "RAPM", u32 version, descriptor JSON (length-prefixed UTF-8),
// u32 block count, then per block: name, u32 rank, u64 extents, f64 values.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const RpnModel& model) {
    io::Writer out;
    out.bytes("RAPM");
    out.u32(kCheckpointVersion);
    out.string(model.descriptor.to_json().dump());
    out.u32(static_cast<std::uint32_t>(model.parameters.size()));
    for (const auto& p : model.parameters) {
        out.string(p.name);
        out.u32(static_cast<std::uint32_t>(p.value.shape().size()));
        for (auto e : p.value.shape()) out.u64(e);
        for (double v : p.value.values()) out.f64(v);
    }
    return out.data();
}

inline RpnModel decode_checkpoint(const std::vector<std::uint8_t>& data) {
    io::Reader in(data);
    in.expect("RAPM");
    auto version = in.u32();
    if (version != kCheckpointVersion) {
        throw io::FormatError("checkpoint: unsupported version " + std::to_string(version), in.offset());
    }
    RpnModel model;
    auto desc_offset = in.offset();
    try {
        model.descriptor = ArchitectureDescriptor::from_json(nlohmann::json::parse(in.string()));
    } catch (const io::FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw io::FormatError(std::string("checkpoint: bad descriptor: ") + e.what(), desc_offset);
    }
    RpnModel reference = make_model(model.descriptor);
    auto count = in.u32();
    if (count != reference.parameters.size()) {
        throw io::FormatError("checkpoint: parameter count does not match descriptor", in.offset());
    }
    for (std::uint32_t b = 0; b < count; ++b) {
        auto block_offset = in.offset();
        NamedTensor p;
        p.name = in.string();
        auto rank = in.u32();
        if (rank > 8) throw io::FormatError("checkpoint: implausible rank", in.offset());
        ad::Shape shape(rank);
        for (auto& e : shape) e = in.u64();
        if (p.name != reference.parameters[b].name || shape != reference.parameters[b].value.shape()) {
            throw io::FormatError("checkpoint: block " + p.name + " does not match descriptor", block_offset);
        }
        std::size_t n = ad::element_count(shape);
        in.need(n * 8, "parameter values");
        std::vector<double> v(n);
        for (double& x : v) x = in.f64();
        p.value = ad::Tensor(std::move(shape), std::move(v));
        model.parameters.push_back(std::move(p));
    }
    if (!in.at_end()) throw io::FormatError("checkpoint: trailing bytes", in.offset());
    return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const RpnModel& model) {
    io::write_file(path, encode_checkpoint(model));
}

inline RpnModel load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(io::read_file(path));
}

}  // namespace rap
