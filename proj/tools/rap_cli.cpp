// Command-line front end: rap_cli {generate,train,attack,matrix,sweep}.
// Exit codes: 0 success, 2 invalid input, 3 training gate failure.

#include <cstdio>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "rap/harness.hpp"

namespace {

using namespace rap;
using namespace rap::harness;

struct Overrides {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> train_count, eval_count, attack_count, epochs, threads, max_iters;
    std::optional<double> lr, mu1, mu2, tau, lambda, epsilon, alpha, shape_weight, gate;
    std::optional<std::string> holdout;
    std::vector<double> floors;
    bool no_shape_loss = false;

    ExperimentConfig resolve() const {
        ExperimentConfig c = config_path.empty() ? ExperimentConfig::fixture() : load_config(config_path);
        if (seed) c.dataset.seed = *seed;
        if (train_count) c.dataset.train_count = *train_count;
        if (eval_count) c.dataset.eval_count = *eval_count;
        if (attack_count) c.dataset.attack_count = *attack_count;
        if (epochs) c.training.epochs = *epochs;
        if (lr) c.training.learning_rate = *lr;
        if (threads) c.threads = *threads;
        if (mu1) c.attack.mu1 = *mu1;
        if (mu2) c.attack.mu2 = *mu2;
        if (tau) c.attack.tau = {*tau, *tau, *tau, *tau};
        if (lambda) c.attack.lambda = *lambda;
        if (max_iters) c.attack.max_iters = *max_iters;
        if (epsilon) c.attack.epsilon = *epsilon;
        if (alpha) c.attack.alpha = *alpha;
        if (shape_weight) c.attack.shape_weight = *shape_weight;
        if (no_shape_loss) c.attack.use_shape_loss = false;
        if (gate) c.gate_ap50 = *gate;
        if (holdout) c.holdout = *holdout;
        if (!floors.empty()) c.sweep_floors = floors;
        c.validate();
        return c;
    }
};

void add_common(CLI::App* app, Overrides& o) {
    app->add_option("--config", o.config_path, "Experiment config JSON (defaults to the fixture)");
    app->add_option("--threads", o.threads, "Worker threads");
}

void add_dataset(CLI::App* app, Overrides& o) {
    app->add_option("--seed", o.seed, "Dataset seed");
    app->add_option("--train-count", o.train_count, "Training scenes");
    app->add_option("--eval-count", o.eval_count, "Evaluation scenes");
}

void add_attack(CLI::App* app, Overrides& o) {
    app->add_option("--attack-count", o.attack_count, "Evaluation scenes to attack");
    app->add_option("--mu1", o.mu1, "IoU threshold for positive proposals");
    app->add_option("--mu2", o.mu2, "Score threshold for positive proposals");
    app->add_option("--tau", o.tau, "Shape-loss target offset (all four components)");
    app->add_option("--lambda", o.lambda, "Step norm");
    app->add_option("--max-iters", o.max_iters, "Iteration budget");
    app->add_option("--epsilon", o.epsilon, "PSNR floor in dB");
    app->add_option("--alpha", o.alpha, "Accumulation scale");
    app->add_option("--shape-weight", o.shape_weight, "Weight of the shape loss");
    app->add_flag("--no-shape-loss", o.no_shape_loss, "Attack with the label loss only");
}

void print_gates(const TrainOutcome& t) {
    for (const auto& g : t.gates) {
        std::printf("%-12s clean ap50 %.4f ap70 %.4f %s (%.1f s)\n", g.model.c_str(), g.clean_ap50, g.clean_ap70,
                    g.passed ? "pass" : "FAIL", g.seconds);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Robust adversarial perturbation experiments on a toy region proposal network"};
    app.require_subcommand(1);
    Overrides o;

    std::string out_dir, data_dir, models_dir, model_path, split = "eval";
    bool force = false;

    auto* gen = app.add_subcommand("generate", "Write the synthetic dataset");
    add_common(gen, o);
    add_dataset(gen, o);
    gen->add_option("--out", out_dir, "Dataset directory")->required();
    gen->add_flag("--force", force, "Overwrite a non-empty directory");

    auto* train = app.add_subcommand("train", "Train every configured victim and apply the clean-AP gate");
    add_common(train, o);
    train->add_option("--data", data_dir, "Dataset directory")->required();
    train->add_option("--out", models_dir, "Checkpoint directory")->required();
    train->add_option("--epochs", o.epochs, "Training epochs");
    train->add_option("--lr", o.lr, "Base learning rate");
    train->add_option("--gate", o.gate, "Minimum clean AP@0.5");

    auto* attack = app.add_subcommand("attack", "Attack scenes with one checkpoint");
    add_common(attack, o);
    add_attack(attack, o);
    attack->add_option("--model", model_path, "Checkpoint file")->required();
    attack->add_option("--data", data_dir, "Dataset directory")->required();
    attack->add_option("--split", split, "Dataset split")->check(CLI::IsMember({"train", "eval"}));
    attack->add_option("--out", out_dir, "Output directory")->required();

    auto* matrix = app.add_subcommand("matrix", "Source x target transfer matrix");
    add_common(matrix, o);
    add_attack(matrix, o);
    matrix->add_option("--holdout", o.holdout, "Model excluded from the accumulated perturbation");
    matrix->add_option("--data", data_dir, "Dataset directory")->required();
    matrix->add_option("--models", models_dir, "Checkpoint directory")->required();
    matrix->add_option("--out", out_dir, "Output directory")->required();

    auto* sweep = app.add_subcommand("sweep", "AP@0.5 across PSNR floors");
    add_common(sweep, o);
    add_attack(sweep, o);
    sweep->add_option("--holdout", o.holdout, "Model excluded from the accumulated perturbation");
    sweep->add_option("--floors", o.floors, "PSNR floors in dB");
    sweep->add_option("--data", data_dir, "Dataset directory")->required();
    sweep->add_option("--models", models_dir, "Checkpoint directory")->required();
    sweep->add_option("--out", out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg = o.resolve();
        if (gen->parsed()) {
            auto manifest = cmd_generate(cfg, out_dir, force);
            std::cout << manifest["splits"].dump() << "\n";
        } else if (train->parsed()) {
            auto outcome = train_all(cfg, load_split(data_dir, "train"), load_split(data_dir, "eval"), models_dir);
            print_gates(outcome);
            if (!outcome.all_passed()) throw GateFailure("clean AP@0.5 below the gate; see gate.json");
        } else if (attack->parsed()) {
            auto scenes = load_split(data_dir, split);
            if (split == "eval") scenes.resize(std::min(scenes.size(), cfg.dataset.attack_count));
            auto summary = cmd_attack(cfg, model_path, scenes, out_dir);
            std::printf("attacked %zu scenes\n", summary.results.size());
        } else if (matrix->parsed()) {
            auto result = cmd_matrix(cfg, data_dir, models_dir, out_dir);
            for (const auto& r : result.rows) {
                std::printf("%-12s -> %-12s %.1f/%.1f\n", r.source.c_str(), r.target.c_str(), 100.0 * r.report.ap50,
                            100.0 * r.report.ap70);
            }
        } else if (sweep->parsed()) {
            auto rows = cmd_sweep(cfg, data_dir, models_dir, out_dir);
            std::printf("wrote %zu sweep rows\n", rows.size());
        }
    } catch (const GateFailure& e) {
        std::cerr << "gate failure: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const io::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
