// dact: train, evaluate, and ablate diffusion action policies on the toy
// manipulation benchmarks.
//
// Subcommands:
//   generate  write an expert demonstration dataset (manifest.json + episodes.bin)
//   train     train a policy, writing loss.csv and checkpoint.dact
//   eval      roll out a checkpoint and write a report.json
//   ablate    sweep one axis (strategy | future-steps | cfg | arch) into a CSV
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dact/runner.hpp"
#include "dact/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct FlagOverrides {
    std::string config_path;
    std::vector<uint64_t> seeds;
    std::string preset;
    std::vector<std::string> strategies;
    int future_steps = -1;
    double cfg_scale = -1;
    int ddim_steps = -1;
    int episodes = -1;
    int steps = -1;
    std::string out_dir;
    std::string data_dir;
    std::string checkpoint;
    std::string resume;
    std::vector<std::string> tasks;
    std::string trace_dir;
    std::string sweep = "strategy";
};

void add_common_flags(CLI::App* cmd, FlagOverrides& f) {
    cmd->add_option("--config", f.config_path, "JSON config file; flags override its fields");
    cmd->add_option("--seed", f.seeds, "seed list")->delimiter(',');
    cmd->add_option("--preset", f.preset, "model preset")
        ->check(CLI::IsMember({"dit-tiny", "dit-small", "dit-base", "dit-large", "mlp3", "mlp7", "mlp3-desk",
                               "mlp7-desk"}));
    cmd->add_option("--strategy", f.strategies, "ensemble strategies (chunk|temporal|adaptive)")->delimiter(',');
    cmd->add_option("--future-steps", f.future_steps, "N future actions predicted per call");
    cmd->add_option("--cfg-scale", f.cfg_scale, "classifier-free guidance coefficient");
    cmd->add_option("--ddim-steps", f.ddim_steps, "DDIM sampling steps");
    cmd->add_option("--episodes", f.episodes, "episodes per task (and per seed at eval)");
    cmd->add_option("--steps", f.steps, "training steps");
    cmd->add_option("--out", f.out_dir, "output directory");
    cmd->add_option("--data", f.data_dir, "dataset directory");
    cmd->add_option("--ckpt", f.checkpoint, "checkpoint path");
    cmd->add_option("--resume", f.resume, "checkpoint to resume training from");
    cmd->add_option("--task", f.tasks, "task list (reach|pick_place|detour|stack)")->delimiter(',');
    cmd->add_option("--trace", f.trace_dir, "write per-step traces into this directory");
}

dact::RunConfig resolve(const FlagOverrides& f) {
    dact::RunConfig cfg;
    if (!f.config_path.empty()) cfg = dact::RunConfig::from_file(f.config_path);
    if (!f.seeds.empty()) cfg.seeds = f.seeds;
    if (!f.preset.empty()) cfg.preset = f.preset;
    if (!f.strategies.empty()) cfg.strategies = f.strategies;
    if (f.future_steps >= 0) cfg.future_steps = f.future_steps;
    if (f.cfg_scale >= 0) cfg.cfg_scale = f.cfg_scale;
    if (f.ddim_steps > 0) cfg.ddim_steps = f.ddim_steps;
    if (f.episodes > 0) cfg.episodes = f.episodes;
    if (f.steps > 0) cfg.steps = f.steps;
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    if (!f.data_dir.empty()) cfg.data_dir = f.data_dir;
    if (!f.checkpoint.empty()) cfg.checkpoint = f.checkpoint;
    if (!f.resume.empty()) cfg.resume = f.resume;
    if (!f.tasks.empty()) cfg.tasks = f.tasks;
    if (cfg.seeds.empty()) throw std::invalid_argument("seed list must be non-empty");
    for (const auto& s : cfg.strategies) dact::strategy_from_name(s);  // validate early
    for (const auto& t : cfg.tasks) dact::task_from_name(t);
    return cfg;
}

int cmd_generate(const FlagOverrides& flags) {
    const auto cfg = resolve(flags);
    auto gen = dact::generate_dataset(cfg);
    dact::save_dataset(gen.dataset, cfg.out_dir);
    if (!flags.trace_dir.empty()) {
        fs::create_directories(flags.trace_dir);
        // First stored episode of each requested task.
        for (const auto& tname : cfg.tasks) {
            for (const auto& ep : gen.dataset.episodes) {
                if (ep.task_id != static_cast<int>(dact::task_from_name(tname))) continue;
                std::ofstream csv(fs::path(flags.trace_dir) / ("expert_" + tname + ".csv"));
                dact::write_trajectory_csv(ep, csv);
                break;
            }
        }
    }
    std::cout << "wrote " << gen.dataset.episodes.size() << " episodes (" << gen.flagged << " flagged) to "
              << cfg.out_dir << "\n";
    return 0;
}

template <class Real>
int run_train(const dact::RunConfig& cfg) {
    const auto data = dact::load_dataset(cfg.data_dir);
    auto state = dact::train_model<Real>(cfg, data, cfg.out_dir);
    std::cout << "trained " << cfg.preset << " for " << state.step << " steps; checkpoint at "
              << (fs::path(cfg.out_dir) / "checkpoint.dact").string() << "\n";
    return 0;
}

int cmd_train(const FlagOverrides& flags) {
    const auto cfg = resolve(flags);
    if (cfg.data_dir.empty()) throw std::invalid_argument("train requires --data");
    if (cfg.precision == "f64") return run_train<double>(cfg);
    if (cfg.precision == "f32") return run_train<float>(cfg);
    throw std::invalid_argument("unknown precision: " + cfg.precision);
}

template <class Real>
int run_eval(const dact::RunConfig& cfg, const std::string& trace_dir) {
    const auto data = dact::load_dataset(cfg.data_dir);
    auto state = dact::load_for_eval<Real>(cfg.checkpoint);
    const auto report = dact::eval_report(state, data, cfg, dact::build_id());

    fs::create_directories(cfg.out_dir);
    const auto report_path = fs::path(cfg.out_dir) / "report.json";
    std::ofstream out(report_path);
    out << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";

    if (!trace_dir.empty()) {
        fs::create_directories(trace_dir);
        const dact::Task task = dact::task_from_name(cfg.tasks.at(0));
        const dact::SimConfig sim = cfg.sim_config(task);
        auto ctx = dact::make_policy_context(state, data, cfg, cfg.strategies.at(0));
        const uint64_t ep_seed = dact::mix_seed(cfg.seeds.at(0), uint64_t{1});
        std::ofstream jsonl(fs::path(trace_dir) / "episode_0.jsonl");
        dact::TraceSink sink(jsonl);
        dact::EpisodePolicy<Real> policy(ctx, ep_seed, &sink);
        dact::rollout(policy, task, ep_seed, sim);
    }
    return 0;
}

int cmd_eval(const FlagOverrides& flags) {
    const auto cfg = resolve(flags);
    if (cfg.data_dir.empty() || cfg.checkpoint.empty())
        throw std::invalid_argument("eval requires --data and --ckpt");
    const auto meta = dact::checkpoint_meta(cfg.checkpoint);
    const std::string precision = meta.at("precision").get<std::string>();
    if (precision == "f64") return run_eval<double>(cfg, flags.trace_dir);
    return run_eval<float>(cfg, flags.trace_dir);
}

// One ablation row: evaluate and reduce per-seed success into mean +- stderr.
struct AblateRow {
    std::string variant;
    double mean_pct = 0;
    double stderr_pct = 0;
    double jerk = 0;
    int episodes = 0;
};

template <class Real>
AblateRow eval_variant(const std::string& variant, const dact::TrainState<Real>& state, const dact::Dataset& data,
                       const dact::RunConfig& cfg, const std::string& strategy) {
    AblateRow row;
    row.variant = variant;
    std::vector<double> per_seed;
    double jerk_acc = 0;
    int jerk_n = 0;
    for (uint64_t seed : cfg.seeds) {
        dact::RunConfig one = cfg;
        one.seeds = {seed};
        one.strategies = {strategy};
        const auto ev = dact::evaluate_strategy(state, data, one, strategy);
        per_seed.push_back(100.0 * ev.overall.success_rate);
        jerk_acc += ev.overall.mean_jerk;
        jerk_n += 1;
        row.episodes += ev.overall.episodes;
    }
    double mean = 0;
    for (double v : per_seed) mean += v;
    mean /= static_cast<double>(per_seed.size());
    double var = 0;
    for (double v : per_seed) var += (v - mean) * (v - mean);
    row.mean_pct = mean;
    row.stderr_pct =
        per_seed.size() > 1 ? std::sqrt(var / (static_cast<double>(per_seed.size()) - 1.0) / static_cast<double>(per_seed.size()))
                            : 0.0;
    row.jerk = jerk_acc / jerk_n;
    return row;
}

int cmd_ablate(const FlagOverrides& flags) {
    const auto cfg = resolve(flags);
    if (cfg.data_dir.empty()) throw std::invalid_argument("ablate requires --data");
    const auto data = dact::load_dataset(cfg.data_dir);
    fs::create_directories(cfg.out_dir);

    std::vector<AblateRow> rows;
    const auto train_or_load = [&](const dact::RunConfig& vcfg, const std::string& tag) {
        const auto dir = fs::path(cfg.out_dir) / tag;
        const auto ckpt = dir / "checkpoint.dact";
        if (fs::exists(ckpt)) return dact::load_for_eval<float>(ckpt.string());
        return dact::train_model<float>(vcfg, data, dir.string());
    };

    if (flags.sweep == "strategy") {
        auto state = cfg.checkpoint.empty() ? train_or_load(cfg, "model") : dact::load_for_eval<float>(cfg.checkpoint);
        for (const std::string s : {"chunk", "temporal", "adaptive"})
            rows.push_back(eval_variant(s, state, data, cfg, s));
    } else if (flags.sweep == "future-steps") {
        for (int n : {0, 3, 7, 15}) {
            dact::RunConfig vcfg = cfg;
            vcfg.future_steps = n;
            auto state = train_or_load(vcfg, "n" + std::to_string(n));
            rows.push_back(eval_variant("N=" + std::to_string(n), state, data, vcfg, cfg.strategies.at(0)));
        }
    } else if (flags.sweep == "cfg") {
        auto state = cfg.checkpoint.empty() ? train_or_load(cfg, "model") : dact::load_for_eval<float>(cfg.checkpoint);
        for (double s : {1.0, 1.5, 3.0}) {
            dact::RunConfig vcfg = cfg;
            vcfg.cfg_scale = s;
            char buf[32];
            std::snprintf(buf, sizeof buf, "cfg=%.1f", s);
            rows.push_back(eval_variant(buf, state, data, vcfg, cfg.strategies.at(0)));
        }
    } else if (flags.sweep == "arch") {
        for (const std::string p : {"dit-tiny", "mlp3-desk"}) {
            dact::RunConfig vcfg = cfg;
            vcfg.preset = p;
            auto state = train_or_load(vcfg, p);
            rows.push_back(eval_variant(p, state, data, vcfg, cfg.strategies.at(0)));
        }
    } else {
        throw std::invalid_argument("unknown sweep: " + flags.sweep);
    }

    const auto csv_path = fs::path(cfg.out_dir) / "ablation.csv";
    std::ofstream csv(csv_path);
    csv << "variant,success_mean_pct,success_stderr_pct,mean_jerk,episodes,seeds\n";
    for (const auto& r : rows)
        csv << r.variant << "," << r.mean_pct << "," << r.stderr_pct << "," << r.jerk << "," << r.episodes << ","
            << cfg.seeds.size() << "\n";
    std::cout << "wrote " << rows.size() << " rows to " << csv_path.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffusion action policies on a toy manipulation benchmark"};
    app.require_subcommand(1);

    FlagOverrides flags;
    auto* generate = app.add_subcommand("generate", "generate an expert demonstration dataset");
    add_common_flags(generate, flags);
    auto* train = app.add_subcommand("train", "train a policy");
    add_common_flags(train, flags);
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common_flags(eval, flags);
    auto* ablate = app.add_subcommand("ablate", "sweep one axis into a comparison CSV");
    add_common_flags(ablate, flags);
    ablate->add_option("--sweep", flags.sweep, "strategy | future-steps | cfg | arch")
        ->check(CLI::IsMember({"strategy", "future-steps", "cfg", "arch"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (generate->parsed()) return cmd_generate(flags);
        if (train->parsed()) return cmd_train(flags);
        if (eval->parsed()) return cmd_eval(flags);
        if (ablate->parsed()) return cmd_ablate(flags);
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
