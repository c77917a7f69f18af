#pragma once

// IoU, NMS, luminance PSNR, class-agnostic average precision, and the
// proposal-level evaluation protocol.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "rap/box.hpp"
#include "rap/rpn.hpp"
#include "rap/scenes.hpp"

namespace rap {

inline double iou(const Box& a, const Box& b) { return box_iou(a, b); }

// ---------------------------------------------------------------------------
// PSNR

/// Value written to files in place of an infinite PSNR (identical images).
inline constexpr double kPsnrSentinel = 999.0;

inline double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

/// PSNR of the BT.601 luminance channel; +infinity when the luminances agree.
inline double psnr_luminance(const Image& reference, const Image& candidate) {
    if (!reference.same_shape(candidate)) {
        throw std::invalid_argument("psnr: shape mismatch " + std::to_string(reference.height) + "x" +
                                    std::to_string(reference.width) + " vs " + std::to_string(candidate.height) +
                                    "x" + std::to_string(candidate.width));
    }
    const std::size_t n = reference.height * reference.width;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* r = &reference.pixels[3 * i];
        const double* c = &candidate.pixels[3 * i];
        double d = luminance(r[0], r[1], r[2]) - luminance(c[0], c[1], c[2]);
        sse += d * d;
    }
    if (sse == 0.0) return std::numeric_limits<double>::infinity();
    double mse = sse / static_cast<double>(n);
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

inline double serializable_psnr(double db) { return std::isinf(db) ? kPsnrSentinel : db; }

// ---------------------------------------------------------------------------
// Detections

struct Detection {
    Box box;
    double score = 0.0;
};

/// Greedy suppression in descending score order (stable: equal scores keep
/// their input order). A detection is dropped when its IoU with an already
/// kept one exceeds `threshold`.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double threshold = 0.5) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw std::invalid_argument("nms: threshold must lie in (0,1]");
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<Detection> kept;
    for (auto i : order) {
        bool suppressed = std::any_of(kept.begin(), kept.end(),
                                      [&](const Detection& k) { return iou(k.box, dets[i].box) > threshold; });
        if (!suppressed) kept.push_back(dets[i]);
    }
    return kept;
}

struct MatchSummary {
    double ap = 0.0;
    std::size_t matched_truths = 0;
    std::size_t total_truths = 0;
};

/// Class-agnostic all-point AP over a pooled set of scenes. Detections are
/// swept by descending score (ties: scene, then index); each is matched to the
/// highest-IoU unmatched truth of its scene when that IoU reaches `threshold`.
inline MatchSummary match_and_score(const std::vector<std::vector<Detection>>& detections,
                                    const std::vector<GroundTruth>& truths, double threshold) {
    if (detections.size() != truths.size()) {
        throw std::invalid_argument("average_precision: detections for " + std::to_string(detections.size()) +
                                    " scenes but truths for " + std::to_string(truths.size()));
    }
    MatchSummary out;
    for (const auto& t : truths) out.total_truths += t.boxes.size();
    if (out.total_truths == 0) throw std::invalid_argument("average_precision: no ground-truth boxes");

    std::vector<std::tuple<double, std::size_t, std::size_t>> sweep;
    for (std::size_t s = 0; s < detections.size(); ++s) {
        for (std::size_t k = 0; k < detections[s].size(); ++k) sweep.emplace_back(detections[s][k].score, s, k);
    }
    std::sort(sweep.begin(), sweep.end(), [](const auto& a, const auto& b) {
        if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
        if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
        return std::get<2>(a) < std::get<2>(b);
    });

    std::vector<std::vector<bool>> used(truths.size());
    for (std::size_t s = 0; s < truths.size(); ++s) used[s].assign(truths[s].boxes.size(), false);

    std::vector<double> recall, precision;
    std::size_t tp = 0, seen = 0;
    for (const auto& [score, s, k] : sweep) {
        ++seen;
        const Box& box = detections[s][k].box;
        double best = -1.0;
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < truths[s].boxes.size(); ++i) {
            if (used[s][i]) continue;
            double v = iou(box, truths[s].boxes[i]);
            if (v > best) {
                best = v;
                best_i = i;
            }
        }
        if (best >= threshold) {
            used[s][best_i] = true;
            ++tp;
        }
        recall.push_back(static_cast<double>(tp) / static_cast<double>(out.total_truths));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    }
    out.matched_truths = tp;

    // Precision envelope, integrated over recall steps.
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
        out.ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return out;
}

inline double average_precision(const std::vector<std::vector<Detection>>& detections,
                                const std::vector<GroundTruth>& truths, double threshold) {
    return match_and_score(detections, truths, threshold).ap;
}

// ---------------------------------------------------------------------------
// Evaluation protocol

struct EvalOptions {
    std::size_t top_k = 50;
    double nms_threshold = 0.5;
};

struct EvalReport {
    double ap50 = 0.0;
    double ap70 = 0.0;
    double recall50 = 0.0;
    std::size_t scenes = 0;
    std::size_t truths = 0;
    std::size_t detections = 0;
};

/// Decoded, image-clipped proposals after NMS and top-k.
inline std::vector<Detection> detect(const RpnModel& model, const Image& image, const EvalOptions& opt = {}) {
    ProposalSet ps = forward(model, image);
    std::vector<Detection> dets;
    dets.reserve(ps.size());
    const auto W = static_cast<double>(image.width), H = static_cast<double>(image.height);
    for (std::size_t j = 0; j < ps.size(); ++j) {
        Proposal p = ps.proposal(j);
        dets.push_back({p.decoded.clipped(W, H), p.score});
    }
    auto kept = nms(dets, opt.nms_threshold);
    if (kept.size() > opt.top_k) kept.resize(opt.top_k);
    return kept;
}

inline EvalReport score_detections(const std::vector<std::vector<Detection>>& dets,
                                   const std::vector<GroundTruth>& truths) {
    EvalReport r;
    auto m50 = match_and_score(dets, truths, 0.5);
    r.ap50 = m50.ap;
    r.ap70 = average_precision(dets, truths, 0.7);
    r.recall50 = static_cast<double>(m50.matched_truths) / static_cast<double>(m50.total_truths);
    r.scenes = truths.size();
    r.truths = m50.total_truths;
    for (const auto& d : dets) r.detections += d.size();
    return r;
}

/// Applies `perturbations[i]` (when given) to scene i with clipping, then
/// scores the detections at IoU 0.5 and 0.7.
inline EvalReport evaluate(const RpnModel& model, const std::vector<Scene>& scenes,
                           const std::vector<std::vector<double>>* perturbations = nullptr,
                           const EvalOptions& opt = {}) {
    if (perturbations && perturbations->size() != scenes.size()) {
        throw std::invalid_argument("evaluate: perturbation count does not match scene count");
    }
    std::vector<std::vector<Detection>> dets;
    std::vector<GroundTruth> truths;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const Image* img = &scenes[i].image;
        Image perturbed;
        if (perturbations) {
            const auto& p = (*perturbations)[i];
            if (p.size() != img->pixels.size()) {
                throw std::invalid_argument("evaluate: perturbation shape does not match scene " +
                                            std::to_string(scenes[i].id));
            }
            perturbed = *img;
            for (std::size_t k = 0; k < p.size(); ++k) perturbed.pixels[k] += p[k];
            perturbed = clip_to_range(std::move(perturbed));
            img = &perturbed;
        }
        dets.push_back(detect(model, *img, opt));
        truths.push_back(scenes[i].truth);
    }
    return score_detections(dets, truths);
}

}  // namespace rap
