#pragma once

// Robust adversarial perturbation of a region proposal network: the
// positive-proposal indicator, label and shape losses, the PSNR-bounded
// normalized-gradient iteration, perturbation accumulation across models,
// and the matched-PSNR Gaussian-noise baseline.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rap/binary_io.hpp"
#include "rap/metrics.hpp"
#include "rap/numerics.hpp"
#include "rap/random.hpp"
#include "rap/rpn.hpp"
#include "rap/scenes.hpp"

namespace rap {

struct AttackConfig {
    /// IoU a proposal must exceed against some truth box to count as positive.
    double mu1 = 0.1;
    /// Score a proposal must exceed to count as positive.
    double mu2 = 0.4;
    /// Target offsets (dx, dy, dw, dh) the shape loss pulls positives towards.
    std::array<double, 4> tau{1e5, 1e5, 1e5, 1e5};
    /// L2 norm of every update step.
    double lambda = 30.0;
    std::size_t max_iters = 210;
    /// PSNR floor in dB against the clean image.
    double epsilon = 30.0;
    /// Scale applied to the sum of per-model perturbations.
    double alpha = 0.5;
    bool use_shape_loss = true;
    double shape_weight = 1.0;

    void validate() const {
        auto fail = [](const std::string& why) { throw std::invalid_argument("attack config: " + why); };
        if (!(mu1 >= 0.0 && mu1 < 1.0)) fail("mu1 must lie in [0,1)");
        if (!(mu2 > 0.0 && mu2 < 1.0)) fail("mu2 must lie in (0,1)");
        if (!(lambda > 0.0)) fail("lambda must be positive");
        if (!(epsilon > 0.0)) fail("epsilon must be positive");
        if (!(alpha > 0.0)) fail("alpha must be positive");
        if (!(shape_weight >= 0.0)) fail("shape_weight must be non-negative");
        for (double t : tau) {
            if (!std::isfinite(t)) fail("tau must be finite");
        }
    }

    nlohmann::json to_json() const {
        return {{"mu1", mu1},         {"mu2", mu2},     {"tau", tau},
                {"lambda", lambda},   {"max_iters", max_iters},
                {"epsilon", epsilon}, {"alpha", alpha}, {"use_shape_loss", use_shape_loss},
                {"shape_weight", shape_weight}};
    }

    static AttackConfig from_json(const nlohmann::json& j) {
        AttackConfig c;
        c.mu1 = j.value("mu1", c.mu1);
        c.mu2 = j.value("mu2", c.mu2);
        c.tau = j.value("tau", c.tau);
        c.lambda = j.value("lambda", c.lambda);
        c.max_iters = j.value("max_iters", c.max_iters);
        c.epsilon = j.value("epsilon", c.epsilon);
        c.alpha = j.value("alpha", c.alpha);
        c.use_shape_loss = j.value("use_shape_loss", c.use_shape_loss);
        c.shape_weight = j.value("shape_weight", c.shape_weight);
        c.validate();
        return c;
    }
};

enum class Termination { MaxIters, NoPositives, PsnrFloor, Stalled, NotApplicable };

inline std::string to_string(Termination t) {
    switch (t) {
        case Termination::MaxIters: return "max-iters";
        case Termination::NoPositives: return "no-positives";
        case Termination::PsnrFloor: return "psnr-floor";
        case Termination::Stalled: return "stalled";
        case Termination::NotApplicable: return "n/a";
    }
    return "n/a";
}

inline Termination termination_from_string(const std::string& s) {
    for (auto t : {Termination::MaxIters, Termination::NoPositives, Termination::PsnrFloor, Termination::Stalled,
                   Termination::NotApplicable}) {
        if (to_string(t) == s) return t;
    }
    throw std::invalid_argument("unknown termination reason \"" + s + "\"");
}

/// Signed additive perturbation shaped like an image.
struct Perturbation {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;
    std::string source;
    std::size_t iterations = 0;
    /// Luminance PSNR of the perturbed image against the clean one.
    double final_psnr = std::numeric_limits<double>::infinity();
    Termination reason = Termination::NotApplicable;

    static Perturbation zeros(const Image& like) {
        Perturbation p;
        p.height = like.height;
        p.width = like.width;
        p.values.assign(like.pixels.size(), 0.0);
        return p;
    }

    /// clip(image + values) to [0,255].
    Image apply(const Image& image) const {
        if (image.height != height || image.width != width) {
            throw std::invalid_argument("perturbation: shape does not match image");
        }
        Image out = image;
        for (std::size_t i = 0; i < values.size(); ++i) out.pixels[i] += values[i];
        return clip_to_range(std::move(out));
    }
};

struct TraceEntry {
    double loss = 0.0;
    std::size_t positives = 0;
    /// PSNR of the iterate this entry was computed on.
    double psnr = 0.0;
    /// Norm of the update computed from this iterate before clipping; 0 when
    /// no update was computed.
    double step_norm = 0.0;
};

struct AttackTrace {
    std::vector<TraceEntry> entries;
};

struct AttackResult {
    Perturbation perturbation;
    AttackTrace trace;
};

// ---------------------------------------------------------------------------
// Losses

/// z_j = 1 iff some truth box has IoU > mu1 with proposal j and s_j > mu2.
inline std::vector<std::uint8_t> positive_mask(const std::vector<Proposal>& proposals, const GroundTruth& truth,
                                               double mu1, double mu2) {
    std::vector<std::uint8_t> z(proposals.size(), 0);
    for (std::size_t j = 0; j < proposals.size(); ++j) {
        if (!(proposals[j].score > mu2)) continue;
        for (const auto& b : truth.boxes) {
            if (iou(b, proposals[j].decoded) > mu1) {
                z[j] = 1;
                break;
            }
        }
    }
    return z;
}

inline std::size_t count_positive(const std::vector<std::uint8_t>& z) {
    return static_cast<std::size_t>(std::count(z.begin(), z.end(), std::uint8_t{1}));
}

/// Sum over positives of log(score), scores floored at 1e-12.
inline ad::Tensor label_loss(const ProposalSet& ps, const std::vector<std::uint8_t>& z) {
    if (count_positive(z) == 0) return ad::Tensor::scalar(0.0);
    auto s = ad::masked_select(ps.scores, ps.score_mask(z));
    return ad::sum(ad::log(ad::clamp_min(s, 1e-12)));
}

/// Sum over positives of the squared distance of raw offsets from tau.
inline ad::Tensor shape_loss(const ProposalSet& ps, const std::vector<std::uint8_t>& z,
                             const std::array<double, 4>& tau) {
    if (count_positive(z) == 0) return ad::Tensor::scalar(0.0);
    auto mask = ps.offset_mask(z);
    auto d = ad::masked_select(ps.offsets, mask);
    // masked_select keeps row-major order; the offset component is channel % 4.
    std::vector<double> target;
    target.reserve(d.size());
    const std::size_t plane = ps.feature_height * ps.feature_width;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) target.push_back(tau[(i / plane) % 4]);
    }
    return ad::sum(ad::square(ad::sub(d, ad::Tensor(d.shape(), std::move(target)))));
}

inline ad::Tensor attack_loss(const ProposalSet& ps, const std::vector<std::uint8_t>& z, const AttackConfig& cfg) {
    ad::Tensor loss = label_loss(ps, z);
    if (cfg.use_shape_loss) {
        loss = ad::add(loss, ad::scale(shape_loss(ps, z, cfg.tau), cfg.shape_weight));
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Iterative generator

namespace detail {

inline void check_attackable(const RpnModel& model, const Image& image) {
    const std::size_t stride = model.descriptor.anchors.stride;
    if (image.height % stride != 0 || image.width % stride != 0) {
        throw std::invalid_argument("attack: image " + std::to_string(image.height) + "x" +
                                    std::to_string(image.width) + " not divisible by model stride " +
                                    std::to_string(stride));
    }
}

inline Perturbation difference(const Image& current, const Image& original, const std::string& source,
                               std::size_t iterations, Termination reason) {
    Perturbation p = Perturbation::zeros(original);
    for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = current.pixels[i] - original.pixels[i];
    p.source = source;
    p.iterations = iterations;
    p.final_psnr = psnr_luminance(original, current);
    p.reason = reason;
    return p;
}

}  // namespace detail

/// Runs the attack once per PSNR floor in a single pass. The iterate sequence
/// does not depend on the floor, so each result equals a separate run_attack
/// with epsilon set to that floor.
inline std::vector<AttackResult> run_attack_floors(const RpnModel& model, const Scene& scene, AttackConfig cfg,
                                                   std::span<const double> floors) {
    cfg.validate();
    if (floors.empty()) throw std::invalid_argument("attack: no PSNR floors given");
    for (double f : floors) {
        if (!(f > 0.0)) throw std::invalid_argument("attack: PSNR floors must be positive");
    }
    detail::check_attackable(model, scene.image);
    const Image& original = scene.image;
    const std::string& source = model.descriptor.name;

    std::vector<std::optional<AttackResult>> done(floors.size());
    auto finish = [&](std::size_t k, const Image& current, std::size_t t, Termination reason,
                      const AttackTrace& trace) {
        done[k] = AttackResult{detail::difference(current, original, source, t, reason), trace};
    };
    auto finish_all = [&](const Image& current, std::size_t t, Termination reason, const AttackTrace& trace) {
        for (std::size_t k = 0; k < floors.size(); ++k) {
            if (!done[k]) finish(k, current, t, reason, trace);
        }
    };
    auto collect = [&] {
        std::vector<AttackResult> out;
        for (auto& d : done) out.push_back(std::move(*d));
        return out;
    };

    AttackTrace trace;
    if (scene.truth.boxes.empty()) {
        finish_all(original, 0, Termination::NoPositives, trace);
        return collect();
    }

    Image current = original;
    for (std::size_t t = 0;; ++t) {
        ad::Tape tape;
        ad::Tensor x = tape.variable(image_tensor(current));
        ProposalSet ps = forward(model, x);
        auto z = positive_mask(ps.proposals(), scene.truth, cfg.mu1, cfg.mu2);
        const std::size_t positives = count_positive(z);
        ad::Tensor loss = attack_loss(ps, z, cfg);
        trace.entries.push_back({loss.item(), positives, psnr_luminance(original, current), 0.0});

        if (positives == 0) {
            finish_all(current, t, Termination::NoPositives, trace);
            break;
        }
        if (t >= cfg.max_iters) {
            finish_all(current, t, Termination::MaxIters, trace);
            break;
        }
        auto grad = interleave_channels(tape.backward(loss).wrt(x).values(), current.height, current.width);
        double norm2 = 0.0;
        for (double g : grad) norm2 += g * g;
        const double norm = std::sqrt(norm2);
        if (norm == 0.0) {
            finish_all(current, t, Termination::Stalled, trace);
            break;
        }
        const double factor = cfg.lambda / norm;
        double step2 = 0.0;
        Image next = current;
        for (std::size_t i = 0; i < grad.size(); ++i) {
            const double step = factor * grad[i];
            step2 += step * step;
            next.pixels[i] = std::clamp(current.pixels[i] - step, 0.0, 255.0);
        }
        trace.entries.back().step_norm = std::sqrt(step2);

        // The fresh iterate is rejected if it breaks a floor; the returned
        // image always satisfies PSNR >= floor.
        const double next_psnr = psnr_luminance(original, next);
        bool pending = false;
        for (std::size_t k = 0; k < floors.size(); ++k) {
            if (done[k]) continue;
            if (next_psnr < floors[k]) {
                finish(k, current, t, Termination::PsnrFloor, trace);
            } else {
                pending = true;
            }
        }
        if (!pending) break;
        current = std::move(next);
    }
    return collect();
}

inline AttackResult run_attack(const RpnModel& model, const Scene& scene, const AttackConfig& cfg) {
    const double floor = cfg.epsilon;
    return std::move(run_attack_floors(model, scene, cfg, std::span<const double>(&floor, 1)).front());
}

/// Mean IoU, on the perturbed image, between each proposal that was positive
/// on the clean image and the truth box it overlapped most on the clean image.
/// Returns nullopt when the clean image has no positives.
inline std::optional<double> tracked_positive_iou(const RpnModel& model, const Scene& scene,
                                                  const Perturbation& perturbation, const AttackConfig& cfg) {
    auto clean = forward(model, scene.image).proposals();
    auto z = positive_mask(clean, scene.truth, cfg.mu1, cfg.mu2);
    if (count_positive(z) == 0) return std::nullopt;
    auto attacked = forward(model, perturbation.apply(scene.image)).proposals();
    double total = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
        if (!z[j]) continue;
        const Box* match = nullptr;
        double best = -1.0;
        for (const auto& b : scene.truth.boxes) {
            double v = iou(b, clean[j].decoded);
            if (v > best) {
                best = v;
                match = &b;
            }
        }
        total += iou(*match, attacked[j].decoded);
    }
    return total / static_cast<double>(count_positive(z));
}

// ---------------------------------------------------------------------------
// Accumulation and baseline

/// alpha * elementwise sum of the given perturbations.
inline Perturbation accumulate(std::span<const Perturbation> parts, double alpha) {
    if (parts.empty()) throw std::invalid_argument("accumulate: no perturbations");
    if (!(alpha > 0.0)) throw std::invalid_argument("accumulate: alpha must be positive");
    Perturbation out;
    out.height = parts.front().height;
    out.width = parts.front().width;
    out.values.assign(parts.front().values.size(), 0.0);
    out.source = "accumulated";
    for (const auto& p : parts) {
        if (p.height != out.height || p.width != out.width || p.values.size() != out.values.size()) {
            throw std::invalid_argument("accumulate: perturbation shapes differ");
        }
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += p.values[i];
    }
    for (double& v : out.values) v *= alpha;
    return out;
}

/// Zero-mean Gaussian noise whose magnitude is bisected until the clipped
/// image's luminance PSNR is within 0.1 dB of `target_psnr`. The returned
/// values already include the clipping.
inline Perturbation gaussian_baseline(const Image& image, double target_psnr, std::uint64_t seed) {
    constexpr double kMaxTarget = 90.0;
    constexpr double kTolerance = 0.1;
    if (!(target_psnr > 0.0) || target_psnr > kMaxTarget) {
        throw std::invalid_argument("gaussian baseline: target PSNR " + std::to_string(target_psnr) +
                                    " dB outside (0, 90]");
    }
    KeyedRng rng{0x4e4f4953ULL, seed};
    std::vector<double> noise(image.pixels.size());
    for (double& n : noise) n = rng.normal();

    auto perturbed = [&](double sigma) {
        Image out = image;
        for (std::size_t i = 0; i < noise.size(); ++i) out.pixels[i] += sigma * noise[i];
        return clip_to_range(std::move(out));
    };
    auto psnr_at = [&](double sigma) { return psnr_luminance(image, perturbed(sigma)); };

    double lo = 0.0, hi = 1.0;
    while (psnr_at(hi) >= target_psnr) {
        hi *= 2.0;
        if (hi > 4096.0) {
            throw std::invalid_argument("gaussian baseline: target PSNR " + std::to_string(target_psnr) +
                                        " dB unreachable for this image");
        }
    }
    double sigma = hi;
    double achieved = psnr_at(hi);
    for (int step = 0; step < 50 && std::abs(achieved - target_psnr) > kTolerance; ++step) {
        sigma = 0.5 * (lo + hi);
        achieved = psnr_at(sigma);
        if (achieved >= target_psnr) {
            lo = sigma;
        } else {
            hi = sigma;
        }
    }
    if (std::abs(achieved - target_psnr) > kTolerance) {
        throw std::invalid_argument("gaussian baseline: could not reach " + std::to_string(target_psnr) + " dB");
    }
    Perturbation p = detail::difference(perturbed(sigma), image, "random", 0, Termination::NotApplicable);
    return p;
}

// ---------------------------------------------------------------------------
// Perturbation files: .rawimg container with magic "RAPP" (signed values)
// plus a JSON sidecar.

inline constexpr std::string_view kPerturbationMagic = "RAPP";

inline void write_perturbation(const std::filesystem::path& path, const Perturbation& p,
                               const nlohmann::json& extra = nlohmann::json::object()) {
    io::write_file(path, rap::detail::encode_raw(kPerturbationMagic, p.height, p.width, p.values));
    nlohmann::json side = extra;
    side["source"] = p.source;
    side["iterations"] = p.iterations;
    side["final_psnr"] = serializable_psnr(p.final_psnr);
    side["termination"] = to_string(p.reason);
    auto text = side.dump(1);
    auto sidecar = path;
    sidecar += ".json";
    io::write_file(sidecar, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline Perturbation read_perturbation(const std::filesystem::path& path) {
    Image raw = rap::detail::decode_raw(kPerturbationMagic, io::read_file(path));
    Perturbation p;
    p.height = raw.height;
    p.width = raw.width;
    p.values = std::move(raw.pixels);
    auto sidecar = path;
    sidecar += ".json";
    if (std::filesystem::exists(sidecar)) {
        auto bytes = io::read_file(sidecar);
        auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
        p.source = j.value("source", "");
        p.iterations = j.value("iterations", std::size_t{0});
        double psnr = j.value("final_psnr", kPsnrSentinel);
        p.final_psnr = psnr >= kPsnrSentinel ? std::numeric_limits<double>::infinity() : psnr;
        p.reason = termination_from_string(j.value("termination", "n/a"));
    }
    return p;
}

}  // namespace rap
