#include "revbd/config.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <limits>
#include <sstream>

#include "revbd/errors.hpp"
#include "revbd/hashing.hpp"

namespace revbd {

namespace {

struct KeyDefault {
    const char* key;
    const char* value;
};

// Full-scale defaults. Order here is irrelevant; dump() sorts.
constexpr KeyDefault kDefaults[] = {
    {"data.name", "synthetic-toy"},
    {"data.root", ""},
    {"data.fraction", "1.0"},
    {"data.seed", "0"},
    {"data.image_size", "32"},
    {"data.synthetic.train_per_class", "1000"},
    {"data.synthetic.test_per_class", "200"},
    {"data.synthetic.classes", "10"},

    {"train.arch", "tiny-cnn"},
    {"train.insertion_layers", ""},
    {"train.epochs", "180"},
    {"train.batch_size", "256"},
    {"train.sgd.lr", "0.01"},
    {"train.sgd.momentum", "0.9"},
    {"train.sgd.weight_decay", "0.0005"},
    {"train.adam.lr", "0.001"},
    {"train.alpha", "10"},
    {"train.alpha_per_element", "false"},
    {"train.sgd.schedule", "constant"},
    {"train.beta", "0.01"},
    {"train.t", "10"},
    {"train.confidence", "auto"},
    {"train.poison.initial_rate", "0.5"},
    {"train.poison.decay_start", "80"},
    {"train.poison.decay_interval", "10"},
    {"train.poison.decay_factor", "0.5"},
    {"train.trigger_ft.enabled", "true"},
    {"train.trigger_ft.epochs", "20"},
    {"train.trigger_ft.poison_rate", "0.5"},
    {"train.trigger_ft.slack", "2"},
    {"train.seed", "0"},
    {"train.augment", "false"},
    {"train.eval_limit", "0"},
    {"train.clean_reference", "false"},

    {"defense.kind", "finetune"},
    {"defense.clean_fraction", "0.05"},
    {"defense.epochs", "50"},
    {"defense.batch_size", "64"},
    {"defense.lr", "0.01"},
    {"defense.momentum", "0.9"},
    {"defense.weight_decay", "0.0005"},
    {"defense.prune.step", "10"},
    {"defense.prune.drop_budget", "0.01"},
    {"defense.prune.finetune_epochs", "1"},
    {"defense.prune.max_channels", "all"},
    {"defense.nad.weight", "5000"},
    {"defense.nad.teacher_epochs", "10"},
    {"defense.spurious.alpha", "10"},
    {"defense.spurious.lr", "0.001"},
    {"defense.seed", "0"},

    {"eval.attack_threshold_factor", "1.5"},
    {"eval.revocation_slack", "5"},

    {"output.dir", "runs/latest"},
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string iso_time(std::time_t t) {
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

Config::Config() {
    for (const auto& d : kDefaults) values_[d.key] = d.value;
}

std::vector<std::string> Config::keys() {
    std::vector<std::string> out;
    for (const auto& d : kDefaults) out.emplace_back(d.key);
    std::sort(out.begin(), out.end());
    return out;
}

Config Config::parse(const std::string& text, const std::string& origin) {
    Config c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        try {
            c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return c;
}

Config Config::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
    overridden_[key] = true;
}

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

bool Config::is_default(const std::string& key) const {
    get(key);
    return !overridden_.contains(key);
}

double Config::get_double(const std::string& key) const {
    const auto& v = get(key);
    if (v == "inf") return std::numeric_limits<double>::infinity();
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

std::int64_t Config::get_int(const std::string& key) const {
    const auto& v = get(key);
    try {
        std::size_t used = 0;
        const auto i = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

bool Config::get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<std::int64_t> Config::get_int_list(const std::string& key) const {
    std::vector<std::int64_t> out;
    std::istringstream in(get(key));
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            out.push_back(std::stoll(item));
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected a comma-separated integer list");
        }
    }
    return out;
}

std::string Config::dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
}

nlohmann::json Config::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
}

std::filesystem::path data_root(const Config& config) {
    if (!config.get("data.root").empty()) return config.get("data.root");
    if (const char* env = std::getenv("REVBD_DATA_ROOT"); env && *env) return env;
    return "data";
}

DatasetOptions dataset_options(const Config& c) {
    DatasetOptions o;
    o.root = data_root(c);
    o.fraction = c.get_double("data.fraction");
    if (!(o.fraction > 0.0 && o.fraction <= 1.0)) throw ConfigError("data.fraction must be in (0, 1]");
    o.seed = static_cast<std::uint64_t>(c.get_int("data.seed"));
    o.image_size = c.get_int("data.image_size");
    o.synthetic_train_per_class = c.get_int("data.synthetic.train_per_class");
    o.synthetic_test_per_class = c.get_int("data.synthetic.test_per_class");
    o.synthetic_classes = c.get_int("data.synthetic.classes");
    if (o.image_size < 8 || o.synthetic_train_per_class < 1 || o.synthetic_test_per_class < 1 ||
        o.synthetic_classes < 2) {
        throw ConfigError("invalid dataset sizes");
    }
    return o;
}

TrainConfig train_config(const Config& c) {
    TrainConfig t;
    t.arch = c.get("train.arch");
    t.insertion_layers = c.get_int_list("train.insertion_layers");
    t.epochs = c.get_int("train.epochs");
    t.batch_size = c.get_int("train.batch_size");
    t.sgd_lr = c.get_double("train.sgd.lr");
    t.sgd_momentum = c.get_double("train.sgd.momentum");
    t.sgd_weight_decay = c.get_double("train.sgd.weight_decay");
    t.adam_lr = c.get_double("train.adam.lr");
    t.alpha = c.get_double("train.alpha");
    t.alpha_per_element = c.get_bool("train.alpha_per_element");
    t.sgd_schedule = c.get("train.sgd.schedule");
    t.beta = c.get_double("train.beta");
    t.trigger_bound = c.get_double("train.t");
    if (c.get("train.confidence") != "auto") t.confidence = c.get_double("train.confidence");
    t.schedule.initial_rate = c.get_double("train.poison.initial_rate");
    t.schedule.decay_start = c.get_int("train.poison.decay_start");
    t.schedule.decay_interval = c.get_int("train.poison.decay_interval");
    t.schedule.decay_factor = c.get_double("train.poison.decay_factor");
    t.trigger_ft_epochs = c.get_bool("train.trigger_ft.enabled") ? c.get_int("train.trigger_ft.epochs") : 0;
    t.trigger_ft_poison_rate = c.get_double("train.trigger_ft.poison_rate");
    t.trigger_ft_slack = c.get_double("train.trigger_ft.slack");
    t.seed = static_cast<std::uint64_t>(c.get_int("train.seed"));
    t.augment = c.get_bool("train.augment");
    t.eval_limit = c.get_int("train.eval_limit");
    t.validate();
    return t;
}

DefenseConfig defense_config(const Config& c) {
    DefenseConfig d;
    d.kind = defense_kind_from_string(c.get("defense.kind"));
    d.clean_fraction = c.get_double("defense.clean_fraction");
    d.epochs = c.get_int("defense.epochs");
    d.batch_size = c.get_int("defense.batch_size");
    d.lr = c.get_double("defense.lr");
    d.momentum = c.get_double("defense.momentum");
    d.weight_decay = c.get_double("defense.weight_decay");
    d.prune_step = c.get_int("defense.prune.step");
    d.drop_budget = c.get_double("defense.prune.drop_budget");
    d.prune_finetune_epochs = c.get_int("defense.prune.finetune_epochs");
    if (c.get("defense.prune.max_channels") != "all") d.max_pruned = c.get_int("defense.prune.max_channels");
    d.nad_weight = c.get_double("defense.nad.weight");
    d.nad_teacher_epochs = c.get_int("defense.nad.teacher_epochs");
    d.spurious_alpha = c.get_double("defense.spurious.alpha");
    d.spurious_lr = c.get_double("defense.spurious.lr");
    d.seed = static_cast<std::uint64_t>(c.get_int("defense.seed"));
    d.validate();
    return d;
}

nlohmann::json RunManifest::to_json() const {
    nlohmann::json files_json = nlohmann::json::array();
    for (const auto& f : files) files_json.push_back({{"path", f.path}, {"sha256", f.sha256}, {"bytes", f.bytes}});
    return {{"command", command},           {"config_path", config_path}, {"seed", seed},
            {"output_dir", output_dir},     {"started_utc", started_utc}, {"finished_utc", finished_utc},
            {"arguments", arguments},       {"effective_config", effective_config},
            {"files", files_json}};
}

std::string utc_now() {
    return iso_time(std::chrono::system_clock::to_time_t(std::chrono::system_clock::now()));
}

void write_manifest(const std::filesystem::path& dir, RunManifest manifest) {
    namespace fs = std::filesystem;
    manifest.files.clear();
    std::vector<fs::path> paths;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().filename() != "manifest.json") paths.push_back(entry.path());
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
        manifest.files.push_back({fs::relative(p, dir).generic_string(), sha256_file(p), fs::file_size(p)});
    }
    if (manifest.finished_utc.empty()) manifest.finished_utc = utc_now();
    std::ofstream out(dir / "manifest.json");
    if (!out) throw Error("cannot write manifest in " + dir.string());
    out << manifest.to_json().dump(2) << '\n';
}

}  // namespace revbd
