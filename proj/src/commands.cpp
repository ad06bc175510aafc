#include "revbd/commands.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "revbd/archive.hpp"
#include "revbd/bundle.hpp"
#include "revbd/errors.hpp"
#include "revbd/evaluation.hpp"
#include "revbd/hashing.hpp"
#include "revbd/visualize.hpp"

namespace revbd {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path prepare_output(const Config& config) {
    fs::path dir = config.get("output.dir");
    fs::create_directories(dir);
    write_text(dir / "config.txt", config.dump());
    return dir;
}

RunManifest manifest_for(const std::string& command, const CommandEnv& env, std::uint64_t seed, const fs::path& dir,
                         const std::string& started) {
    RunManifest m;
    m.command = command;
    m.config_path = env.config_path;
    m.seed = seed;
    m.output_dir = dir.string();
    m.started_utc = started;
    m.arguments = env.arguments;
    m.effective_config = env.config.dump();
    return m;
}

ReportOptions report_options(const Config& config, bool masked) {
    ReportOptions o;
    o.masked = masked;
    o.attack_threshold_factor = config.get_double("eval.attack_threshold_factor");
    o.config = config.to_json();
    return o;
}

void write_report(const fs::path& dir, const EvalReport& report) {
    write_text(dir / "report.json", report.to_json().dump(2) + "\n");
    write_text(dir / "report.txt", report.table());
}

DatasetHandle load_data(const Config& config) { return load_dataset(config.get("data.name"), dataset_options(config)); }

// Sample residual for the first test image.
void write_images(const fs::path& dir, const DatasetHandle& data, const TriggerPattern& trigger) {
    write_png(dir / "trigger.png", trigger_image(trigger));
    const std::int64_t first = data.test_ids().front();
    auto clean = data.gather(std::span<const std::int64_t>(&first, 1)).images;
    auto poisoned = apply_trigger(clean, trigger.delta().detach());
    write_png(dir / "residual.png", residual_panel(clean[0], poisoned[0]));
}

nlohmann::json quality_json(const TriggerQuality& q) {
    return {{"psnr", std::isinf(q.mean_psnr) ? nlohmann::json("inf") : nlohmann::json(q.mean_psnr)},
            {"ssim", q.mean_ssim},
            {"images", q.images}};
}

// Minimal line chart: one polyline per series on a 0..100 accuracy axis.
void plot_series(const fs::path& path, const std::vector<std::pair<std::string, std::vector<double>>>& series) {
    constexpr int kW = 640, kH = 360, kPad = 40;
    cv::Mat img(kH, kW, CV_8UC3, cv::Scalar(255, 255, 255));
    cv::rectangle(img, {kPad, kPad / 2}, {kW - kPad / 2, kH - kPad}, cv::Scalar(0, 0, 0));
    const cv::Scalar palette[] = {{200, 60, 30}, {30, 30, 200}, {40, 150, 40}, {150, 40, 150}};
    std::size_t longest = 1;
    for (const auto& [_, v] : series) longest = std::max(longest, v.size());
    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& values = series[s].second;
        std::vector<cv::Point> pts;
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!std::isfinite(values[i])) continue;
            const double x = kPad + (kW - 1.5 * kPad) * (longest > 1 ? double(i) / double(longest - 1) : 0.0);
            const double y = (kH - kPad) - (kH - 1.5 * kPad) * std::clamp(values[i], 0.0, 100.0) / 100.0;
            pts.emplace_back(static_cast<int>(x), static_cast<int>(y));
        }
        const auto colour = palette[s % 4];
        if (pts.size() > 1) cv::polylines(img, pts, false, colour, 2);
        cv::putText(img, series[s].first, {kPad + 8, kPad + 16 * static_cast<int>(s + 1)}, cv::FONT_HERSHEY_SIMPLEX,
                    0.45, colour, 1);
    }
    cv::putText(img, "100", {4, kPad / 2 + 10}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
    cv::putText(img, "0", {20, kH - kPad}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
    if (!cv::imwrite(path.string(), img)) throw Error("cannot write " + path.string());
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    std::string cell;
    while (std::getline(in, cell, ',')) out.push_back(cell);
    return out;
}

double parse_cell(const std::string& cell) {
    try {
        return std::stod(cell);
    } catch (const std::exception&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

}  // namespace

int cmd_train(const CommandEnv& env, std::ostream& out) {
    const auto started = utc_now();
    const auto& config = env.config;
    auto tc = train_config(config);
    auto data = load_data(config);
    const auto dir = prepare_output(config);

    std::ofstream metrics(dir / "metrics.csv");
    std::ofstream losses(dir / "loss.log");
    metrics << metrics_csv_header() << '\n';
    losses << "# step clean_ce poison_capped rev reg trigger_norm total\n";
    long phase_offset = 0;
    long last_step = 0;
    TrainHooks hooks;
    hooks.on_step = [&](long step, const LossBreakdown& loss) {
        last_step = phase_offset + step;
        losses << format_loss_line(last_step, loss) << '\n';
    };
    hooks.on_epoch = [&](const EpochMetrics& m) {
        metrics << to_csv(m) << '\n';
        metrics.flush();
        out << m.phase << " epoch " << m.epoch << ": clean " << std::fixed << std::setprecision(2) << m.unmasked_clean
            << " poison " << m.unmasked_poison << " | masked clean " << m.masked_clean << " poison " << m.masked_poison
            << '\n';
    };

    auto artifacts = train_revocable(tc, data, hooks);
    phase_offset = last_step + 1;

    nlohmann::json ft_json = {{"enabled", tc.trigger_ft_epochs > 0}};
    if (tc.trigger_ft_epochs > 0) {
        const auto before = trigger_quality(data, data.test_ids(), trigger_poisoner(artifacts.trigger));
        auto ft = finetune_trigger(artifacts, data, hooks);
        const auto after = trigger_quality(data, data.test_ids(), trigger_poisoner(artifacts.trigger));
        ft_json["before"] = quality_json(before);
        ft_json["after"] = quality_json(after);
        ft_json["train_probe_poison_acc_before"] = ft.poison_acc_before;
        ft_json["train_probe_poison_acc_after"] = ft.poison_acc_after;
    }
    metrics.close();
    losses.close();
    write_text(dir / "trigger_ft.json", ft_json.dump(2) + "\n");

    std::optional<double> reference;
    if (config.get_bool("train.clean_reference")) {
        auto clean = train_clean(tc, data);
        reference = accuracy(clean.model, data, data.test_ids(), {}, false);
    }

    const auto cfg_json = config.to_json();
    save_bundle(dir / "trial.rvb", artifacts.model, artifacts.trigger, cfg_json, BundleKind::Trial);
    save_bundle(dir / "final.rvb", artifacts.model, artifacts.trigger, cfg_json, BundleKind::Final);
    write_file_bytes(dir / "masks.rvb", export_masks(artifacts.model.masks()));
    write_images(dir, data, artifacts.trigger);

    const auto report = build_report(artifacts.model, artifacts.trigger, data, reference, report_options(config, true));
    write_report(dir, report);
    out << report.table();
    write_manifest(dir, manifest_for("train", env, tc.seed, dir, started));
    return kExitOk;
}

int cmd_revoke(const CommandEnv& env, const fs::path& trial, const fs::path& masks, std::ostream& out) {
    const auto started = utc_now();
    auto bundle = load_bundle(trial);
    if (bundle.kind != BundleKind::Trial) throw ConfigError(trial.string() + " is not a trial bundle");
    install_masks(bundle.model, import_masks(read_file_bytes(masks)));
    auto data = load_data(env.config);
    const auto dir = prepare_output(env.config);
    const auto report = build_report(bundle.model, bundle.trigger, data, std::nullopt, report_options(env.config, true));
    save_bundle(dir / "final.rvb", bundle.model, bundle.trigger, bundle.config, BundleKind::Final);
    write_report(dir, report);
    out << report.table();
    write_manifest(dir, manifest_for("revoke", env, 0, dir, started));
    const double slack = env.config.get_double("eval.revocation_slack");
    if (!report.revoked(slack)) {
        out << "not revoked: masked poison accuracy is more than " << slack << " points below masked clean accuracy\n";
        return kExitThreshold;
    }
    return kExitOk;
}

int cmd_eval(const CommandEnv& env, const fs::path& bundle_path, const std::optional<fs::path>& trigger_from,
             bool require_effective, std::ostream& out) {
    auto bundle = load_bundle(bundle_path);
    if (bundle.kind == BundleKind::Trial && bundle.model.has_masks()) {
        throw FormatError("trial bundle carries masks");
    }
    auto trigger = bundle.trigger;
    if (trigger_from) trigger = load_bundle(*trigger_from).trigger;
    auto data = load_data(env.config);
    const bool masked = bundle.kind == BundleKind::Final;
    const auto report = build_report(bundle.model, trigger, data, std::nullopt, report_options(env.config, masked));
    if (!env.config.is_default("output.dir")) {
        fs::path dir = env.config.get("output.dir");
        fs::create_directories(dir);
        write_report(dir, report);
    }
    out << "bundle: " << to_string(bundle.kind) << " (" << sha256_file(bundle_path).substr(0, 16) << ")\n";
    out << report.table();
    if (require_effective && !report.attack_effective()) {
        out << "attack not effective: poison accuracy " << report.unmasked_poison << " > " << report.attack_threshold
            << '\n';
        return kExitThreshold;
    }
    return kExitOk;
}

int cmd_defend(const CommandEnv& env, const fs::path& bundle_path, std::ostream& out) {
    const auto started = utc_now();
    const auto dc = defense_config(env.config);
    auto bundle = load_bundle(bundle_path);
    auto data = load_data(env.config);
    auto model = bundle.model.clone();
    // Only the trial model reaches a defender.
    model.set_masks(std::nullopt);
    const Poisoner trigger = bundle.trigger.defined() ? trigger_poisoner(bundle.trigger) : Poisoner{};
    const auto subset = clean_fraction_split(data, dc.clean_fraction, dc.seed);
    const auto outcome = run_defense(model, data, subset, dc, test_probe(data, trigger),
                                     dc.kind == DefenseKind::Erase ? trigger : Poisoner{});
    const auto dir = prepare_output(env.config);
    const auto name = to_string(dc.kind);
    write_text(dir / ("defense_" + name + ".json"), outcome.to_json().dump(2) + "\n");
    write_text(dir / ("defense_" + name + ".csv"), defense_table_csv({outcome}));
    write_text(dir / ("defense_" + name + ".txt"), defense_table_text({outcome}));
    if (!outcome.curve.empty()) write_text(dir / "pruning_curve.csv", pruning_curve_csv(outcome));
    out << defense_table_text({outcome});
    write_manifest(dir, manifest_for("defend", env, dc.seed, dir, started));
    return kExitOk;
}

int cmd_report(const fs::path& run_dir, std::ostream& out) {
    if (!fs::is_directory(run_dir) || fs::is_empty(run_dir)) {
        throw DataError("nothing to report in " + run_dir.string());
    }
    bool found = false;
    if (fs::exists(run_dir / "report.txt")) {
        out << read_text(run_dir / "report.txt");
        found = true;
    }
    if (fs::exists(run_dir / "trigger_ft.json")) {
        const auto ft = nlohmann::json::parse(read_text(run_dir / "trigger_ft.json"));
        if (ft.value("enabled", false)) {
            out << "trigger fine-tuning: PSNR " << ft["before"]["psnr"] << " -> " << ft["after"]["psnr"] << ", SSIM "
                << ft["before"]["ssim"] << " -> " << ft["after"]["ssim"] << '\n';
        }
        found = true;
    }
    std::vector<DefenseOutcome> outcomes;
    std::vector<fs::path> defense_files;
    for (const auto& e : fs::directory_iterator(run_dir)) {
        const auto name = e.path().filename().string();
        if (name.starts_with("defense_") && e.path().extension() == ".json") defense_files.push_back(e.path());
    }
    std::sort(defense_files.begin(), defense_files.end());
    for (const auto& p : defense_files) {
        const auto j = nlohmann::json::parse(read_text(p));
        DefenseOutcome o;
        o.kind = defense_kind_from_string(j.at("kind"));
        o.pre_clean = j.at("pre_clean");
        o.post_clean = j.at("post_clean");
        if (!j.at("pre_poison").is_null()) o.pre_poison = j.at("pre_poison").get<double>();
        if (!j.at("post_poison").is_null()) o.post_poison = j.at("post_poison").get<double>();
        o.steps = j.at("steps");
        o.note = j.value("note", "");
        for (const auto& r : j.at("pruning_curve")) {
            PruneRecord rec;
            rec.pruned = r.at("pruned");
            rec.clean_acc = r.at("clean_acc");
            if (!r.at("poison_acc").is_null()) rec.poison_acc = r.at("poison_acc").get<double>();
            rec.subset_clean = r.at("subset_clean");
            o.curve.push_back(rec);
        }
        outcomes.push_back(std::move(o));
    }
    if (!outcomes.empty()) {
        out << defense_table_text(outcomes);
        write_text(run_dir / "defenses.csv", defense_table_csv(outcomes));
        found = true;
        for (const auto& o : outcomes) {
            if (o.curve.size() < 2) continue;
            std::vector<double> clean, poison;
            for (const auto& r : o.curve) {
                clean.push_back(r.clean_acc);
                poison.push_back(r.poison_acc.value_or(std::numeric_limits<double>::quiet_NaN()));
            }
            plot_series(run_dir / "pruning_curve.png", {{"clean", clean}, {"poison", poison}});
        }
    }
    if (fs::exists(run_dir / "metrics.csv")) {
        std::istringstream in(read_text(run_dir / "metrics.csv"));
        std::string line;
        std::getline(in, line);
        std::vector<double> uc, up, mc, mp;
        while (std::getline(in, line)) {
            const auto cells = split_csv(line);
            if (cells.size() < 13) continue;
            uc.push_back(parse_cell(cells[9]));
            up.push_back(parse_cell(cells[10]));
            mc.push_back(parse_cell(cells[11]));
            mp.push_back(parse_cell(cells[12]));
        }
        if (!uc.empty()) {
            plot_series(run_dir / "training_curves.png",
                        {{"unmasked clean", uc}, {"unmasked poison", up}, {"masked clean", mc}, {"masked poison", mp}});
            out << "training curves: " << uc.size() << " epochs -> training_curves.png\n";
            found = true;
        }
    }
    if (!found) throw DataError("no reports, metrics or defense outcomes in " + run_dir.string());
    return kExitOk;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Revocable-backdoor training and evaluation"};
    app.require_subcommand(1);
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir, dataset, data_root_flag, arch;
    std::optional<std::int64_t> epochs;
    std::optional<std::int64_t> seed;
    std::optional<double> alpha;
    app.add_option("-c,--config", config_path, "config file (key = value lines)");
    app.add_option("--set", sets, "override one key: --set train.alpha=5")->take_all();
    app.add_option("-o,--out", out_dir, "output.dir");
    app.add_option("--dataset", dataset, "data.name");
    app.add_option("--data-root", data_root_flag, "data.root");
    app.add_option("--arch", arch, "train.arch");
    app.add_option("--epochs", epochs, "train.epochs");
    app.add_option("--seed", seed, "train.seed");
    app.add_option("--alpha", alpha, "train.alpha");

    auto* train = app.add_subcommand("train", "train a revocable backdoor; writes trial and final bundles");
    bool no_ft = false;
    train->add_flag("--no-trigger-ft", no_ft, "skip trigger fine-tuning (train.trigger_ft.enabled = false)");
    bool clean_ref = false;
    train->add_flag("--clean-reference", clean_ref, "also train a clean control (train.clean_reference = true)");

    auto* revoke = app.add_subcommand("revoke", "attach a mask file to a trial bundle and verify revocation");
    std::string trial_path, masks_path;
    revoke->add_option("trial", trial_path)->required();
    revoke->add_option("masks", masks_path)->required();

    auto* eval = app.add_subcommand("eval", "evaluate a bundle");
    std::string bundle_path;
    std::optional<std::string> trigger_from;
    bool require_effective = false;
    eval->add_option("bundle", bundle_path)->required();
    eval->add_option("--trigger", trigger_from, "take the trigger from this bundle");
    eval->add_flag("--require-effective", require_effective, "exit 4 unless the attack is effective");

    auto* defend = app.add_subcommand("defend", "run defense.kind against a bundle's trial model");
    std::string defend_bundle, kind;
    defend->add_option("bundle", defend_bundle)->required();
    defend->add_option("--kind", kind, "defense.kind");

    auto* report = app.add_subcommand("report", "render the tables and curves of a run directory");
    std::string run_dir;
    report->add_option("run_dir", run_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        CommandEnv env;
        for (int i = 0; i < argc; ++i) env.arguments.emplace_back(argv[i]);
        if (!config_path.empty()) {
            env.config = Config::load(config_path);
            env.config_path = config_path;
        }
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
            env.config.set(s.substr(0, eq), s.substr(eq + 1));
        }
        if (!out_dir.empty()) env.config.set("output.dir", out_dir);
        if (!dataset.empty()) env.config.set("data.name", dataset);
        if (!data_root_flag.empty()) env.config.set("data.root", data_root_flag);
        if (!arch.empty()) env.config.set("train.arch", arch);
        if (epochs) env.config.set("train.epochs", std::to_string(*epochs));
        if (seed) env.config.set("train.seed", std::to_string(*seed));
        if (alpha) env.config.set("train.alpha", std::to_string(*alpha));
        if (no_ft) env.config.set("train.trigger_ft.enabled", "false");
        if (clean_ref) env.config.set("train.clean_reference", "true");
        if (!kind.empty()) env.config.set("defense.kind", kind);

        if (train->parsed()) return cmd_train(env, out);
        if (revoke->parsed()) return cmd_revoke(env, trial_path, masks_path, out);
        if (eval->parsed()) {
            std::optional<fs::path> from;
            if (trigger_from) from = *trigger_from;
            return cmd_eval(env, bundle_path, from, require_effective, out);
        }
        if (defend->parsed()) return cmd_defend(env, defend_bundle, out);
        if (report->parsed()) return cmd_report(run_dir, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DivergenceError& e) {
        err << "diverged: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const AttackDegradedError& e) {
        err << "threshold: " << e.what() << '\n';
        return kExitThreshold;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitError;
    }
    return kExitError;
}

}  // namespace revbd
