#pragma once

// Experiment orchestration behind the command-line tool: dataset generation,
// victim training with the quality gate, attack runs, the source x target
// transfer matrix, PSNR sweeps, and the shape-loss ablation. Every output file
// starts with '#'-prefixed lines echoing the configuration and the content
// hashes of the checkpoints it depends on.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rap/attack.hpp"
#include "rap/metrics.hpp"
#include "rap/rpn.hpp"
#include "rap/scenes.hpp"

namespace rap::harness {

namespace fs = std::filesystem;
using nlohmann::json;

/// Invalid user input (maps to exit code 2).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A trained victim below the clean-AP gate (maps to exit code 3).
class GateFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
    std::uint64_t seed = 1;
    std::size_t train_count = 500;
    std::size_t eval_count = 200;
    /// Attack experiments use the first attack_count scenes of the eval split.
    std::size_t attack_count = 100;
    GeometryConfig geometry;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    std::vector<ArchitectureDescriptor> models;
    TrainingConfig training;
    /// Victim excluded from the accumulated perturbation.
    std::string holdout;
    AttackConfig attack;
    std::vector<double> sweep_floors{45.0, 42.5, 40.0, 37.5, 35.0, 32.5, 30.0};
    EvalOptions evaluation;
    double gate_ap50 = 0.85;
    std::uint64_t noise_seed = 7;
    /// Iteration budget of the shape-loss ablation.
    std::size_t ablation_iters = 20;
    std::size_t threads = 1;

    /// Three architectures (depth/width 2/8, 3/16, 4/16) x two seeds; the
    /// last one is held out of the accumulation.
    static ExperimentConfig fixture() {
        ExperimentConfig c;
        struct Arch {
            std::size_t depth, width, kernel;
            std::vector<std::size_t> pools;
        };
        const std::vector<Arch> archs{{2, 8, 7, {4, 2}}, {3, 16, 5, {2, 4, 1}}, {4, 16, 5, {2, 4, 1, 1}}};
        for (const auto& [depth, width, kernel, pools] : archs) {
            for (std::uint64_t seed : {1, 2}) {
                ArchitectureDescriptor d;
                d.depth = depth;
                d.width = width;
                d.kernel = kernel;
                d.pools = pools;
                d.seed = seed;
                d.name = "d" + std::to_string(depth) + "w" + std::to_string(width) + "s" + std::to_string(seed);
                c.models.push_back(d);
            }
        }
        c.holdout = c.models.back().name;
        return c;
    }

    void validate() const {
        try {
            dataset.geometry.validate();
            training.validate();
            attack.validate();
            for (const auto& m : models) {
                m.validate();
                if (m.input_height != dataset.geometry.height || m.input_width != dataset.geometry.width) {
                    throw ConfigError("model " + m.name + " input size does not match the scene geometry");
                }
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        if (dataset.train_count == 0 || dataset.eval_count == 0) throw ConfigError("dataset splits must be non-empty");
        if (dataset.attack_count == 0 || dataset.attack_count > dataset.eval_count) {
            throw ConfigError("attack_count must lie in [1, eval_count]");
        }
        if (models.empty()) throw ConfigError("no models configured");
        std::set<std::string> names;
        for (const auto& m : models) {
            if (!names.insert(m.name).second) throw ConfigError("duplicate model name " + m.name);
        }
        if (!holdout.empty() && !names.count(holdout)) throw ConfigError("holdout " + holdout + " is not a model");
        if (sweep_floors.empty()) throw ConfigError("sweep needs at least one PSNR floor");
        for (double f : sweep_floors) {
            if (!(f > 0.0)) throw ConfigError("sweep floors must be positive");
        }
        if (evaluation.top_k == 0) throw ConfigError("top_k must be positive");
        if (!(evaluation.nms_threshold > 0.0 && evaluation.nms_threshold <= 1.0)) {
            throw ConfigError("nms_threshold must lie in (0,1]");
        }
        if (threads == 0) throw ConfigError("threads must be positive");
        if (!(gate_ap50 >= 0.0 && gate_ap50 <= 1.0)) throw ConfigError("gate_ap50 must lie in [0,1]");
    }

    json to_json() const {
        json models_json = json::array();
        for (const auto& m : models) models_json.push_back(m.to_json());
        const auto& g = dataset.geometry;
        return {{"dataset",
                 {{"seed", dataset.seed},
                  {"train_count", dataset.train_count},
                  {"eval_count", dataset.eval_count},
                  {"attack_count", dataset.attack_count},
                  {"geometry",
                   {{"height", g.height},
                    {"width", g.width},
                    {"min_side", g.min_side},
                    {"max_side", g.max_side},
                    {"border_margin", g.border_margin},
                    {"min_shapes", g.min_shapes},
                    {"max_shapes", g.max_shapes},
                    {"placement_attempts", g.placement_attempts},
                    {"max_overlap", g.max_overlap}}}}},
                {"models", models_json},
                {"training",
                 {{"epochs", training.epochs},
                  {"learning_rate", training.learning_rate},
                  {"momentum", training.momentum},
                  {"samples_per_image", training.samples_per_image},
                  {"positive_iou", training.positive_iou},
                  {"negative_iou", training.negative_iou},
                  {"smooth_l1_beta", training.smooth_l1_beta},
                  {"regression_iou", training.regression_iou},
                  {"max_grad_norm", training.max_grad_norm},
                  {"cosine_decay", training.cosine_decay}}},
                {"holdout", holdout},
                {"attack", attack.to_json()},
                {"sweep_floors", sweep_floors},
                {"evaluation", {{"top_k", evaluation.top_k}, {"nms_threshold", evaluation.nms_threshold}}},
                {"gate_ap50", gate_ap50},
                {"noise_seed", noise_seed},
                {"ablation_iters", ablation_iters},
                {"threads", threads}};
    }

    /// Fields missing from `j` keep the fixture defaults.
    static ExperimentConfig from_json(const json& j) {
        ExperimentConfig c = fixture();
        try {
            if (j.contains("dataset")) {
                const auto& d = j["dataset"];
                c.dataset.seed = d.value("seed", c.dataset.seed);
                c.dataset.train_count = d.value("train_count", c.dataset.train_count);
                c.dataset.eval_count = d.value("eval_count", c.dataset.eval_count);
                c.dataset.attack_count = d.value("attack_count", c.dataset.attack_count);
                if (d.contains("geometry")) {
                    const auto& g = d["geometry"];
                    auto& geo = c.dataset.geometry;
                    geo.height = g.value("height", geo.height);
                    geo.width = g.value("width", geo.width);
                    geo.min_side = g.value("min_side", geo.min_side);
                    geo.max_side = g.value("max_side", geo.max_side);
                    geo.border_margin = g.value("border_margin", geo.border_margin);
                    geo.min_shapes = g.value("min_shapes", geo.min_shapes);
                    geo.max_shapes = g.value("max_shapes", geo.max_shapes);
                    geo.placement_attempts = g.value("placement_attempts", geo.placement_attempts);
                    geo.max_overlap = g.value("max_overlap", geo.max_overlap);
                }
            }
            if (j.contains("models")) {
                c.models.clear();
                for (const auto& m : j["models"]) c.models.push_back(ArchitectureDescriptor::from_json(m));
                c.holdout = c.models.empty() ? "" : c.models.back().name;
            }
            if (j.contains("training")) {
                const auto& t = j["training"];
                auto& tr = c.training;
                tr.epochs = t.value("epochs", tr.epochs);
                tr.learning_rate = t.value("learning_rate", tr.learning_rate);
                tr.momentum = t.value("momentum", tr.momentum);
                tr.samples_per_image = t.value("samples_per_image", tr.samples_per_image);
                tr.positive_iou = t.value("positive_iou", tr.positive_iou);
                tr.negative_iou = t.value("negative_iou", tr.negative_iou);
                tr.smooth_l1_beta = t.value("smooth_l1_beta", tr.smooth_l1_beta);
                tr.regression_iou = t.value("regression_iou", tr.regression_iou);
                tr.max_grad_norm = t.value("max_grad_norm", tr.max_grad_norm);
                tr.cosine_decay = t.value("cosine_decay", tr.cosine_decay);
            }
            c.holdout = j.value("holdout", c.holdout);
            if (j.contains("attack")) c.attack = AttackConfig::from_json(j["attack"]);
            c.sweep_floors = j.value("sweep_floors", c.sweep_floors);
            if (j.contains("evaluation")) {
                c.evaluation.top_k = j["evaluation"].value("top_k", c.evaluation.top_k);
                c.evaluation.nms_threshold = j["evaluation"].value("nms_threshold", c.evaluation.nms_threshold);
            }
            c.gate_ap50 = j.value("gate_ap50", c.gate_ap50);
            c.noise_seed = j.value("noise_seed", c.noise_seed);
            c.ablation_iters = j.value("ablation_iters", c.ablation_iters);
            c.threads = j.value("threads", c.threads);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        c.validate();
        return c;
    }

    const ArchitectureDescriptor& model(const std::string& name) const {
        for (const auto& m : models) {
            if (m.name == name) return m;
        }
        throw ConfigError("unknown model " + name);
    }
};

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Utilities

/// Runs fn(0..n-1) on up to `threads` workers. Each index is processed exactly
/// once; callers write results into pre-sized slots, so output order never
/// depends on scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
                next = n;
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

/// FNV-1a, 64 bit, as 16 hex digits.
inline std::string content_hash(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

inline std::string fmt(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
    io::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// '#'-prefixed provenance lines for CSV outputs.
inline std::string provenance(const ExperimentConfig& cfg, const std::map<std::string, std::string>& hashes) {
    std::string out = "# config: " + cfg.to_json().dump() + "\n";
    if (!hashes.empty()) {
        out += "# checkpoints:";
        for (const auto& [name, hash] : hashes) out += " " + name + "=" + hash;
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Datasets on disk: <dir>/manifest.json, <dir>/<split>/<id>.ppm,
// <dir>/<split>/annotations.json

struct SplitRange {
    std::string name;
    std::uint64_t first_id;
    std::size_t count;
};

inline std::vector<SplitRange> splits(const DatasetConfig& d) {
    return {{"train", 0, d.train_count}, {"eval", d.train_count, d.eval_count}};
}

inline std::vector<Scene> generate_split(const DatasetConfig& d, const std::string& name) {
    for (const auto& s : splits(d)) {
        if (s.name == name) return generate_dataset(d.seed, s.count, d.geometry, s.first_id);
    }
    throw ConfigError("unknown split " + name);
}

inline json cmd_generate(const ExperimentConfig& cfg, const fs::path& out_dir, bool force) {
    cfg.validate();
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force) {
        throw ConfigError("output directory " + out_dir.string() + " is not empty (use --force)");
    }
    fs::create_directories(out_dir);
    json manifest{{"config", cfg.to_json()}, {"seed", cfg.dataset.seed}, {"splits", json::object()}};
    for (const auto& split : splits(cfg.dataset)) {
        fs::path dir = out_dir / split.name;
        fs::create_directories(dir);
        auto scenes = generate_dataset(cfg.dataset.seed, split.count, cfg.dataset.geometry, split.first_id);
        Annotations truths;
        std::size_t boxes = 0;
        for (const auto& s : scenes) {
            write_image(dir / (scene_key(s.id) + ".ppm"), s.image);
            truths[scene_key(s.id)] = s.truth;
            boxes += s.truth.boxes.size();
        }
        write_annotations(dir / "annotations.json", truths);
        manifest["splits"][split.name] = {{"first_id", split.first_id}, {"count", split.count}, {"boxes", boxes}};
    }
    write_text(out_dir / "manifest.json", manifest.dump(1));
    return manifest;
}

inline std::vector<Scene> load_split(const fs::path& data_dir, const std::string& name) {
    fs::path manifest_path = data_dir / "manifest.json";
    if (!fs::exists(manifest_path)) throw ConfigError("no dataset at " + data_dir.string());
    auto bytes = io::read_file(manifest_path);
    auto manifest = json::parse(bytes.begin(), bytes.end());
    if (!manifest["splits"].contains(name)) throw ConfigError("dataset has no split " + name);
    auto first = manifest["splits"][name]["first_id"].get<std::uint64_t>();
    auto count = manifest["splits"][name]["count"].get<std::size_t>();
    auto seed = manifest["seed"].get<std::uint64_t>();
    auto truths = read_annotations(data_dir / name / "annotations.json");
    std::vector<Scene> scenes;
    for (std::uint64_t id = first; id < first + count; ++id) {
        Scene s;
        s.id = id;
        s.seed = seed;
        s.image = read_image(data_dir / name / (scene_key(id) + ".ppm"));
        auto it = truths.find(scene_key(id));
        if (it == truths.end()) throw ConfigError("annotations miss scene " + scene_key(id));
        s.truth = it->second;
        scenes.push_back(std::move(s));
    }
    return scenes;
}

// ---------------------------------------------------------------------------
// Training

struct GateResult {
    std::string model;
    double clean_ap50 = 0.0;
    double clean_ap70 = 0.0;
    bool passed = false;
    double seconds = 0.0;
    std::vector<double> loss_history;
};

struct TrainOutcome {
    std::vector<RpnModel> models;
    std::vector<GateResult> gates;

    bool all_passed() const {
        return std::all_of(gates.begin(), gates.end(), [](const GateResult& g) { return g.passed; });
    }
};

inline fs::path checkpoint_path(const fs::path& models_dir, const std::string& name) {
    return models_dir / (name + ".rapm");
}

/// Trains every configured model, gates it on the eval split, and writes
/// <name>.rapm, <name>_loss.csv and gate.json into `models_dir`.
inline TrainOutcome train_all(const ExperimentConfig& cfg, const std::vector<Scene>& train,
                              const std::vector<Scene>& eval, const fs::path& models_dir) {
    cfg.validate();
    fs::create_directories(models_dir);
    TrainOutcome out;
    out.models.resize(cfg.models.size());
    out.gates.resize(cfg.models.size());
    parallel_for(cfg.models.size(), cfg.threads, [&](std::size_t i) {
        auto start = std::chrono::steady_clock::now();
        auto result = train_rpn(make_model(cfg.models[i]), train, cfg.training);
        double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        auto report = evaluate(result.model, eval, nullptr, cfg.evaluation);
        GateResult g{cfg.models[i].name, report.ap50, report.ap70, report.ap50 >= cfg.gate_ap50, seconds,
                     result.loss_history};
        out.models[i] = std::move(result.model);
        out.gates[i] = std::move(g);
    });

    std::map<std::string, std::string> hashes;
    for (const auto& m : out.models) {
        auto bytes = encode_checkpoint(m);
        io::write_file(checkpoint_path(models_dir, m.descriptor.name), bytes);
        hashes[m.descriptor.name] = content_hash(bytes);
    }
    json gate_json{{"config", cfg.to_json()}, {"threshold", cfg.gate_ap50}, {"models", json::array()}};
    for (std::size_t i = 0; i < out.gates.size(); ++i) {
        const auto& g = out.gates[i];
        std::string csv = provenance(cfg, {{g.model, hashes[g.model]}}) + "epoch,mean_loss\n";
        for (std::size_t e = 0; e < g.loss_history.size(); ++e) {
            csv += std::to_string(e) + "," + fmt(g.loss_history[e], 9) + "\n";
        }
        write_text(models_dir / (g.model + "_loss.csv"), csv);
        gate_json["models"].push_back({{"name", g.model},
                                       {"checkpoint_hash", hashes[g.model]},
                                       {"clean_ap50", g.clean_ap50},
                                       {"clean_ap70", g.clean_ap70},
                                       {"passed", g.passed}});
    }
    write_text(models_dir / "gate.json", gate_json.dump(1));
    return out;
}

inline std::vector<RpnModel> load_models(const ExperimentConfig& cfg, const fs::path& models_dir,
                                         std::map<std::string, std::string>* hashes = nullptr) {
    std::vector<RpnModel> out;
    for (const auto& d : cfg.models) {
        auto path = checkpoint_path(models_dir, d.name);
        if (!fs::exists(path)) throw ConfigError("missing checkpoint " + path.string());
        auto bytes = io::read_file(path);
        out.push_back(decode_checkpoint(bytes));
        if (hashes) (*hashes)[d.name] = content_hash(bytes);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attacks

/// attacks[model][scene][floor]
using AttackGrid = std::vector<std::vector<std::vector<AttackResult>>>;

inline AttackGrid attack_all(const std::vector<RpnModel>& models, const std::vector<Scene>& scenes,
                             const AttackConfig& cfg, std::span<const double> floors, std::size_t threads) {
    for (const auto& m : models) {
        for (const auto& s : scenes) detail::check_attackable(m, s.image);
    }
    AttackGrid grid(models.size(), std::vector<std::vector<AttackResult>>(scenes.size()));
    parallel_for(models.size() * scenes.size(), threads, [&](std::size_t job) {
        std::size_t m = job / scenes.size(), s = job % scenes.size();
        grid[m][s] = run_attack_floors(models[m], scenes[s], cfg, floors);
    });
    return grid;
}

inline std::string termination_histogram(const std::vector<const Perturbation*>& ps) {
    std::map<std::string, std::size_t> counts;
    for (const auto* p : ps) ++counts[to_string(p->reason)];
    std::string out;
    for (const auto& [k, v] : counts) out += (out.empty() ? "" : ";") + k + ":" + std::to_string(v);
    return out;
}

struct AttackRunSummary {
    std::vector<AttackResult> results;
};

/// One attack per scene with `model`; writes <id>.rawimg (+ .json sidecars),
/// trace.csv and summary.csv into `out_dir`.
inline AttackRunSummary cmd_attack(const ExperimentConfig& cfg, const fs::path& model_path,
                                   const std::vector<Scene>& scenes, const fs::path& out_dir) {
    cfg.attack.validate();
    if (!fs::exists(model_path)) throw ConfigError("missing checkpoint " + model_path.string());
    auto bytes = io::read_file(model_path);
    RpnModel model = decode_checkpoint(bytes);
    std::string hash = content_hash(bytes);
    for (const auto& s : scenes) {
        if (s.image.height % model.descriptor.anchors.stride || s.image.width % model.descriptor.anchors.stride) {
            throw ConfigError("scene " + std::to_string(s.id) + " does not match the model stride " +
                              std::to_string(model.descriptor.anchors.stride));
        }
    }
    fs::create_directories(out_dir);
    const double floor = cfg.attack.epsilon;
    auto grid = attack_all({model}, scenes, cfg.attack, std::span<const double>(&floor, 1), cfg.threads);

    AttackRunSummary summary;
    std::string header = provenance(cfg, {{model.descriptor.name, hash}});
    std::string trace = header + "scene,iteration,loss,positives,psnr,step_norm\n";
    std::vector<const Perturbation*> ps;
    double psnr_sum = 0.0, iter_sum = 0.0;
    std::size_t finite = 0;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
        auto& r = grid[0][s][0];
        json side{{"model", model.descriptor.to_json()},
                  {"checkpoint_hash", hash},
                  {"scene", scenes[s].id},
                  {"config", cfg.attack.to_json()}};
        write_perturbation(out_dir / (scene_key(scenes[s].id) + ".rawimg"), r.perturbation, side);
        for (std::size_t t = 0; t < r.trace.entries.size(); ++t) {
            const auto& e = r.trace.entries[t];
            trace += std::to_string(scenes[s].id) + "," + std::to_string(t) + "," + fmt(e.loss, 6) + "," +
                     std::to_string(e.positives) + "," + fmt(serializable_psnr(e.psnr), 6) + "," +
                     fmt(e.step_norm, 9) + "\n";
        }
        ps.push_back(&r.perturbation);
        if (std::isfinite(r.perturbation.final_psnr)) {
            psnr_sum += r.perturbation.final_psnr;
            ++finite;
        }
        iter_sum += static_cast<double>(r.perturbation.iterations);
        summary.results.push_back(r);
    }
    write_text(out_dir / "trace.csv", trace);
    std::string sum_csv = header + "source,scenes,mean_final_psnr,mean_iterations,terminations\n";
    sum_csv += model.descriptor.name + "," + std::to_string(scenes.size()) + "," +
               fmt(finite ? psnr_sum / static_cast<double>(finite) : kPsnrSentinel, 4) + "," +
               fmt(iter_sum / static_cast<double>(scenes.size()), 4) + "," + termination_histogram(ps) + "\n";
    write_text(out_dir / "summary.csv", sum_csv);
    return summary;
}

// ---------------------------------------------------------------------------
// Transfer matrix and sweep

struct ResultRow {
    std::string source;
    std::string target;
    EvalReport report;
    double mean_psnr = kPsnrSentinel;
    double mean_iterations = 0.0;
    std::string terminations;
};

struct MatrixResult {
    std::vector<ResultRow> rows;

    const ResultRow& cell(const std::string& source, const std::string& target) const {
        for (const auto& r : rows) {
            if (r.source == source && r.target == target) return r;
        }
        throw std::out_of_range("no matrix cell " + source + " -> " + target);
    }
};

struct SweepRow {
    double floor;
    std::string source;
    std::string target;
    double ap50;
    double mean_psnr;
};

inline double mean_finite_psnr(const std::vector<const Perturbation*>& ps) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto* p : ps) {
        if (std::isfinite(p->final_psnr)) {
            sum += p->final_psnr;
            ++n;
        }
    }
    return n ? sum / static_cast<double>(n) : kPsnrSentinel;
}

namespace detail {

/// Per-scene perturbation sets for one PSNR floor: the single-model rows,
/// the accumulated row and the matched-PSNR noise row.
struct PerturbationRows {
    std::vector<std::string> names;
    std::vector<std::vector<Perturbation>> rows;  // rows[r][scene]
};

inline PerturbationRows build_rows(const ExperimentConfig& cfg, const std::vector<RpnModel>& models,
                                   const std::vector<Scene>& scenes, const AttackGrid& grid, std::size_t floor_index,
                                   double noise_target) {
    PerturbationRows out;
    const std::size_t n = scenes.size();
    out.names.push_back("random");
    out.rows.emplace_back(n);
    parallel_for(n, cfg.threads, [&](std::size_t s) {
        auto p = gaussian_baseline(scenes[s].image, noise_target, cfg.noise_seed * 1000003ULL + scenes[s].id);
        out.rows[0][s] = std::move(p);
    });
    for (std::size_t m = 0; m < models.size(); ++m) {
        out.names.push_back(models[m].descriptor.name);
        std::vector<Perturbation> row;
        for (std::size_t s = 0; s < n; ++s) row.push_back(grid[m][s][floor_index].perturbation);
        out.rows.push_back(std::move(row));
    }
    std::vector<std::size_t> members;
    for (std::size_t m = 0; m < models.size(); ++m) {
        if (models[m].descriptor.name != cfg.holdout) members.push_back(m);
    }
    if (!members.empty()) {
        out.names.push_back("accumulated");
        std::vector<Perturbation> row;
        for (std::size_t s = 0; s < n; ++s) {
            std::vector<Perturbation> parts;
            for (auto m : members) parts.push_back(grid[m][s][floor_index].perturbation);
            Perturbation p = accumulate(parts, cfg.attack.alpha);
            p.final_psnr = psnr_luminance(scenes[s].image, p.apply(scenes[s].image));
            row.push_back(std::move(p));
        }
        out.rows.push_back(std::move(row));
    }
    return out;
}

/// Evaluates every (row, target) pair; returns reports[row][target].
inline std::vector<std::vector<EvalReport>> evaluate_rows(const ExperimentConfig& cfg,
                                                          const std::vector<RpnModel>& models,
                                                          const std::vector<Scene>& scenes,
                                                          const std::vector<std::vector<Perturbation>>& rows) {
    std::vector<std::vector<EvalReport>> reports(rows.size(), std::vector<EvalReport>(models.size()));
    parallel_for(rows.size() * models.size(), cfg.threads, [&](std::size_t job) {
        std::size_t r = job / models.size(), t = job % models.size();
        std::vector<std::vector<double>> values;
        for (const auto& p : rows[r]) values.push_back(p.values);
        reports[r][t] = evaluate(models[t], scenes, &values, cfg.evaluation);
    });
    return reports;
}

inline double attack_mean_psnr(const AttackGrid& grid, std::size_t floor_index) {
    std::vector<const Perturbation*> ps;
    for (const auto& per_model : grid) {
        for (const auto& per_scene : per_model) ps.push_back(&per_scene[floor_index].perturbation);
    }
    return mean_finite_psnr(ps);
}

}  // namespace detail

inline std::string matrix_csv(const ExperimentConfig& cfg, const std::map<std::string, std::string>& hashes,
                              const MatrixResult& m) {
    std::string csv = provenance(cfg, hashes) +
                      "source,target,ap50,ap70,recall50,cell,mean_psnr,mean_iterations,terminations\n";
    for (const auto& r : m.rows) {
        csv += r.source + "," + r.target + "," + fmt(r.report.ap50) + "," + fmt(r.report.ap70) + "," +
               fmt(r.report.recall50) + "," + fmt(100.0 * r.report.ap50, 1) + "/" + fmt(100.0 * r.report.ap70, 1) +
               "," + fmt(r.mean_psnr, 4) + "," + fmt(r.mean_iterations, 4) + "," + r.terminations + "\n";
    }
    return csv;
}

inline std::string sweep_csv(const ExperimentConfig& cfg, const std::map<std::string, std::string>& hashes,
                             const std::vector<SweepRow>& rows) {
    std::string csv = provenance(cfg, hashes) + "floor,source,target,ap50,mean_psnr\n";
    for (const auto& r : rows) {
        csv += fmt(r.floor, 2) + "," + r.source + "," + r.target + "," + fmt(r.ap50) + "," + fmt(r.mean_psnr, 4) +
               "\n";
    }
    return csv;
}

/// Matrix rows from precomputed attacks at `floor_index`: clean, random
/// (Gaussian at the mean attack PSNR), each single-model perturbation, and
/// the accumulation over all non-holdout models.
inline MatrixResult matrix_from_attacks(const ExperimentConfig& cfg, const std::vector<RpnModel>& models,
                                        const std::vector<Scene>& scenes, const AttackGrid& grid,
                                        std::size_t floor_index) {
    MatrixResult out;
    std::vector<EvalReport> clean(models.size());
    parallel_for(models.size(), cfg.threads,
                 [&](std::size_t t) { clean[t] = evaluate(models[t], scenes, nullptr, cfg.evaluation); });
    for (std::size_t t = 0; t < models.size(); ++t) {
        out.rows.push_back({"clean", models[t].descriptor.name, clean[t], kPsnrSentinel, 0.0, ""});
    }
    double target = detail::attack_mean_psnr(grid, floor_index);
    if (target >= kPsnrSentinel) target = cfg.attack.epsilon;
    auto rows = detail::build_rows(cfg, models, scenes, grid, floor_index, target);
    auto reports = detail::evaluate_rows(cfg, models, scenes, rows.rows);
    for (std::size_t r = 0; r < rows.rows.size(); ++r) {
        std::vector<const Perturbation*> ps;
        double iters = 0.0;
        for (const auto& p : rows.rows[r]) {
            ps.push_back(&p);
            iters += static_cast<double>(p.iterations);
        }
        bool attack_row = rows.names[r] != "random" && rows.names[r] != "accumulated";
        for (std::size_t t = 0; t < models.size(); ++t) {
            out.rows.push_back({rows.names[r], models[t].descriptor.name, reports[r][t], mean_finite_psnr(ps),
                                iters / static_cast<double>(ps.size()), attack_row ? termination_histogram(ps) : ""});
        }
    }
    return out;
}

/// Sweep rows: for each floor, AP@0.5 of every target under the random row
/// (Gaussian at the floor), every single-model row and the accumulated row.
inline std::vector<SweepRow> sweep_from_attacks(const ExperimentConfig& cfg, const std::vector<RpnModel>& models,
                                                const std::vector<Scene>& scenes, const AttackGrid& grid,
                                                std::span<const double> floors) {
    std::vector<SweepRow> out;
    for (std::size_t f = 0; f < floors.size(); ++f) {
        auto rows = detail::build_rows(cfg, models, scenes, grid, f, floors[f]);
        auto reports = detail::evaluate_rows(cfg, models, scenes, rows.rows);
        for (std::size_t r = 0; r < rows.rows.size(); ++r) {
            std::vector<const Perturbation*> ps;
            for (const auto& p : rows.rows[r]) ps.push_back(&p);
            double psnr = mean_finite_psnr(ps);
            for (std::size_t t = 0; t < models.size(); ++t) {
                out.push_back({floors[f], rows.names[r], models[t].descriptor.name, reports[r][t].ap50, psnr});
            }
        }
    }
    return out;
}

inline std::vector<double> with_floor(std::vector<double> floors, double extra) {
    if (std::find(floors.begin(), floors.end(), extra) == floors.end()) floors.push_back(extra);
    return floors;
}

inline std::size_t floor_index(const std::vector<double>& floors, double f) {
    return static_cast<std::size_t>(std::find(floors.begin(), floors.end(), f) - floors.begin());
}

inline MatrixResult cmd_matrix(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& models_dir,
                               const fs::path& out_dir) {
    cfg.validate();
    std::map<std::string, std::string> hashes;
    auto models = load_models(cfg, models_dir, &hashes);
    auto scenes = load_split(data_dir, "eval");
    scenes.resize(std::min(scenes.size(), cfg.dataset.attack_count));
    const double floor = cfg.attack.epsilon;
    auto grid = attack_all(models, scenes, cfg.attack, std::span<const double>(&floor, 1), cfg.threads);
    auto result = matrix_from_attacks(cfg, models, scenes, grid, 0);
    fs::create_directories(out_dir);
    write_text(out_dir / "matrix.csv", matrix_csv(cfg, hashes, result));
    return result;
}

inline std::vector<SweepRow> cmd_sweep(const ExperimentConfig& cfg, const fs::path& data_dir,
                                       const fs::path& models_dir, const fs::path& out_dir) {
    cfg.validate();
    std::map<std::string, std::string> hashes;
    auto models = load_models(cfg, models_dir, &hashes);
    auto scenes = load_split(data_dir, "eval");
    scenes.resize(std::min(scenes.size(), cfg.dataset.attack_count));
    auto grid = attack_all(models, scenes, cfg.attack, cfg.sweep_floors, cfg.threads);
    auto rows = sweep_from_attacks(cfg, models, scenes, grid, cfg.sweep_floors);
    fs::create_directories(out_dir);
    write_text(out_dir / "sweep.csv", sweep_csv(cfg, hashes, rows));
    return rows;
}

// ---------------------------------------------------------------------------
// Shape-loss ablation

struct AblationRow {
    std::string model;
    std::uint64_t scene;
    double iou_with_shape;
    double iou_label_only;
};

/// Tracked-positive IoU after `cfg.ablation_iters` iterations, with and
/// without the shape term. Scenes without clean positives are skipped.
inline std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const std::vector<RpnModel>& models,
                                             const std::vector<Scene>& scenes) {
    AttackConfig with = cfg.attack;
    with.max_iters = std::min(cfg.ablation_iters, cfg.attack.max_iters);
    with.use_shape_loss = true;
    AttackConfig without = with;
    without.use_shape_loss = false;
    std::vector<std::optional<AblationRow>> slots(models.size() * scenes.size());
    parallel_for(slots.size(), cfg.threads, [&](std::size_t job) {
        std::size_t m = job / scenes.size(), s = job % scenes.size();
        auto a = run_attack(models[m], scenes[s], with);
        auto b = run_attack(models[m], scenes[s], without);
        auto ia = tracked_positive_iou(models[m], scenes[s], a.perturbation, with);
        auto ib = tracked_positive_iou(models[m], scenes[s], b.perturbation, without);
        if (ia && ib) slots[job] = AblationRow{models[m].descriptor.name, scenes[s].id, *ia, *ib};
    });
    std::vector<AblationRow> out;
    for (auto& s : slots) {
        if (s) out.push_back(*s);
    }
    return out;
}

inline std::string ablation_csv(const ExperimentConfig& cfg, const std::map<std::string, std::string>& hashes,
                                const std::vector<AblationRow>& rows) {
    std::string csv = provenance(cfg, hashes) + "model,scene,iou_with_shape,iou_label_only\n";
    for (const auto& r : rows) {
        csv += r.model + "," + std::to_string(r.scene) + "," + fmt(r.iou_with_shape, 9) + "," +
               fmt(r.iou_label_only, 9) + "\n";
    }
    return csv;
}

// ---------------------------------------------------------------------------
// Full experiment (what the acceptance suite runs)

struct ExperimentOutcome {
    TrainOutcome training;
    std::vector<Scene> attack_scenes;
    std::vector<double> floors;  // sweep floors plus epsilon
    AttackGrid attacks;
    MatrixResult matrix;
    std::vector<SweepRow> sweep;
    std::vector<AblationRow> ablation;
    std::map<std::string, double> seconds;
};

/// generate -> train -> attacks (once, all floors) -> matrix, sweep and
/// ablation, writing every CSV under `root`.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const fs::path& root) {
    using clock = std::chrono::steady_clock;
    auto since = [](clock::time_point t) { return std::chrono::duration<double>(clock::now() - t).count(); };
    cfg.validate();
    ExperimentOutcome out;

    auto t0 = clock::now();
    cmd_generate(cfg, root / "data", true);
    auto train = load_split(root / "data", "train");
    auto eval = load_split(root / "data", "eval");
    out.seconds["generate"] = since(t0);

    t0 = clock::now();
    out.training = train_all(cfg, train, eval, root / "models");
    out.seconds["train"] = since(t0);
    std::map<std::string, std::string> hashes;
    auto models = load_models(cfg, root / "models", &hashes);

    out.attack_scenes.assign(eval.begin(), eval.begin() + static_cast<std::ptrdiff_t>(cfg.dataset.attack_count));
    out.floors = with_floor(cfg.sweep_floors, cfg.attack.epsilon);
    t0 = clock::now();
    out.attacks = attack_all(models, out.attack_scenes, cfg.attack, out.floors, cfg.threads);
    out.seconds["attack"] = since(t0);

    t0 = clock::now();
    out.matrix = matrix_from_attacks(cfg, models, out.attack_scenes, out.attacks,
                                     floor_index(out.floors, cfg.attack.epsilon));
    out.seconds["matrix"] = since(t0);
    t0 = clock::now();
    std::vector<double> sweep_only(out.floors.begin(),
                                   out.floors.begin() + static_cast<std::ptrdiff_t>(cfg.sweep_floors.size()));
    AttackGrid sweep_grid = out.attacks;
    for (auto& per_model : sweep_grid) {
        for (auto& per_scene : per_model) per_scene.resize(cfg.sweep_floors.size());
    }
    out.sweep = sweep_from_attacks(cfg, models, out.attack_scenes, sweep_grid, sweep_only);
    out.seconds["sweep"] = since(t0);
    t0 = clock::now();
    out.ablation = run_ablation(cfg, models, out.attack_scenes);
    out.seconds["ablation"] = since(t0);

    fs::create_directories(root / "results");
    write_text(root / "results" / "matrix.csv", matrix_csv(cfg, hashes, out.matrix));
    write_text(root / "results" / "sweep.csv", sweep_csv(cfg, hashes, out.sweep));
    write_text(root / "results" / "ablation.csv", ablation_csv(cfg, hashes, out.ablation));

    std::string attacks_csv =
        provenance(cfg, hashes) + "source,scene,iterations,final_psnr,termination,final_positives,max_step_norm\n";
    const std::size_t fi = floor_index(out.floors, cfg.attack.epsilon);
    for (std::size_t m = 0; m < models.size(); ++m) {
        for (std::size_t s = 0; s < out.attack_scenes.size(); ++s) {
            const auto& r = out.attacks[m][s][fi];
            double max_step = 0.0;
            for (const auto& e : r.trace.entries) max_step = std::max(max_step, e.step_norm);
            std::size_t last = r.trace.entries.empty() ? 0 : r.trace.entries.back().positives;
            attacks_csv += models[m].descriptor.name + "," + std::to_string(out.attack_scenes[s].id) + "," +
                           std::to_string(r.perturbation.iterations) + "," +
                           fmt(serializable_psnr(r.perturbation.final_psnr), 6) + "," +
                           to_string(r.perturbation.reason) + "," + std::to_string(last) + "," +
                           fmt(max_step, 9) + "\n";
        }
    }
    write_text(root / "results" / "attacks.csv", attacks_csv);
    return out;
}

}  // namespace rap::harness
