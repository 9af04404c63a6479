#include "sysid/bench.hpp"

#include "sysid/error.hpp"
#include "sysid/systems.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

namespace sysid {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double number_or_inf(const json& j, const char* name) {
    if (!j.contains(name) || j.at(name).is_null()) return kInf;
    return j.at(name).get<double>();
}

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6e", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}

std::string value_text(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path.string());
    f << text;
    if (!f) throw Error("write failed: " + path.string());
}

void append_line(const fs::path& path, const std::string& line) {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    if (!f) throw Error("cannot open for appending: " + path.string());
    f << line << '\n';
    f.flush();
    if (!f) throw Error("write failed: " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open: " + path.string());
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
}

/// Lines of a JSON-lines log; a torn final line (interrupted append) is ignored.
std::vector<json> read_jsonl(const fs::path& path) {
    std::vector<json> out;
    std::ifstream f(path);
    if (!f) return out;
    std::vector<std::string> lines;
    for (std::string line; std::getline(f, line);)
        if (!line.empty()) lines.push_back(line);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        try {
            out.push_back(json::parse(lines[i]));
        } catch (const json::exception& e) {
            if (i + 1 == lines.size()) break;
            throw SchemaError(path.string() + ": line " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return out;
}

/// Drops an incomplete final line left by an interrupted append.
void trim_torn_tail(const fs::path& path) {
    if (!fs::exists(path)) return;
    std::string text;
    {
        std::ifstream f(path, std::ios::binary);
        std::stringstream ss;
        ss << f.rdbuf();
        text = ss.str();
    }
    if (text.empty() || text.back() == '\n') return;
    const auto cut = text.find_last_of('\n');
    write_text(path, cut == std::string::npos ? std::string() : text.substr(0, cut + 1));
}

std::string model_file_name(const std::string& key) {
    std::string s;
    for (char ch : key) s += ch == '/' ? std::string("__") : std::string(1, ch);
    return s + ".json";
}

GridSpec make_grid(std::vector<std::pair<std::string, std::vector<json>>> axes) {
    GridSpec g;
    for (auto& [name, values] : axes) g.axes.push_back({name, std::move(values)});
    return g;
}

Index get_index(const json& h, const char* name, Index min) {
    if (!h.contains(name) || !h.at(name).is_number_integer())
        throw SchemaError(std::string("hyperparameter '") + name + "' must be an integer");
    const auto v = h.at(name).get<Index>();
    if (v < min) throw SchemaError(std::string("hyperparameter '") + name + "' must be >= " + std::to_string(min));
    return v;
}

std::string get_string(const json& h, const char* name) {
    if (!h.contains(name) || !h.at(name).is_string())
        throw SchemaError(std::string("hyperparameter '") + name + "' must be a string");
    return h.at(name).get<std::string>();
}

double get_double(const json& h, const char* name, double min) {
    if (!h.contains(name) || !h.at(name).is_number())
        throw SchemaError(std::string("hyperparameter '") + name + "' must be a number");
    const double v = h.at(name).get<double>();
    if (!(v >= min)) throw SchemaError(std::string("hyperparameter '") + name + "' out of range");
    return v;
}

/// Parses every field of one grid point so that bad values fail before any work.
void check_point(Family f, const json& h) {
    try {
        switch (f) {
            case Family::node:
                get_index(h, "latent_multiplier", 1);
                get_index(h, "field_hidden", 1);
                get_index(h, "encoder_hidden", 0);
                break;
            case Family::nssm:
                linear_map_from_string(get_string(h, "linear_map"));
                block_kind_from_string(get_string(h, "block"));
                get_double(h, "q_dx", 0.0);
                get_index(h, "n_steps", 1);
                get_index(h, "latent_multiplier", 1);
                break;
            case Family::lssm:
                subspace_method_from_string(get_string(h, "method"));
                get_index(h, "n_x", 1);
                get_index(h, "horizon", 1);
                break;
        }
    } catch (const ParameterError& e) {
        throw SchemaError(e.what());
    }
}

Index stride_for(Index n, Index n_p, Index n_steps, Index max_windows) {
    if (max_windows <= 0) return 1;
    const Index count = window_count(n, n_p, n_steps, 1);
    return std::max<Index>(1, (count + max_windows - 1) / max_windows);
}

/// Rows of history the LSSM uses to estimate its state.
Index lssm_warmup(const Lssm& m, Index available) { return std::min(available, 2 * m.n_x()); }

Index warmup_rows(const TrainedModel& m) {
    switch (m.family) {
        case Family::node: return 1;
        case Family::nssm: return m.nssm->n_p;
        case Family::lssm: return 2 * m.lssm->n_x();
    }
    return 1;
}

double eval_mse(const TrainedModel& m, const Trajectory& history, const Trajectory& target, const NormStats& stats) {
    try {
        const Matrix yhat = predict(m, history, target);
        const double v = open_loop_mse(denormalize_outputs(yhat, stats), denormalize_outputs(target.outputs, stats));
        return std::isfinite(v) ? v : kInf;
    } catch (const Error&) {
        return kInf;
    }
}

std::vector<SystemEntry> builtin_entries() {
    std::vector<SystemEntry> out;
    for (const auto& n : builtin_names()) out.push_back({n, "", 0, 0, 0});
    return out;
}

SystemEntry entry_from_json(const json& j) {
    SystemEntry e;
    if (j.is_string()) {
        e.name = j.get<std::string>();
        return e;
    }
    e.name = j.at("name").get<std::string>();
    e.csv = j.value("csv", std::string());
    e.n_u = j.value("n_u", Index{0});
    e.n_y = j.value("n_y", Index{0});
    e.n_samples = j.value("n_samples", Index{0});
    return e;
}

json entry_to_json(const SystemEntry& e) {
    json j = {{"name", e.name}};
    if (!e.csv.empty()) {
        j["csv"] = e.csv;
        j["n_u"] = e.n_u;
        j["n_y"] = e.n_y;
    }
    if (e.n_samples > 0) j["n_samples"] = e.n_samples;
    return j;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

const char* to_string(Family f) {
    switch (f) {
        case Family::node: return "node";
        case Family::nssm: return "nssm";
        case Family::lssm: return "lssm";
    }
    return "?";
}

Family family_from_string(const std::string& s) {
    if (s == "node") return Family::node;
    if (s == "nssm") return Family::nssm;
    if (s == "lssm") return Family::lssm;
    throw ParameterError("unknown model family: " + s);
}

std::size_t GridSpec::size() const {
    if (axes.empty()) return 0;
    std::size_t n = 1;
    for (const auto& a : axes) n *= a.values.size();
    return n;
}

std::vector<json> GridSpec::points() const {
    std::vector<json> out;
    const std::size_t n = size();
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        json p = json::object();
        std::size_t rest = i;
        for (std::size_t a = axes.size(); a-- > 0;) {
            const auto& vals = axes[a].values;
            p[axes[a].name] = vals[rest % vals.size()];
            rest /= vals.size();
        }
        out.push_back(std::move(p));
    }
    return out;
}

GridSpec paper_grid(Family f) {
    switch (f) {
        case Family::node:
            return make_grid({{"latent_multiplier", {1, 5, 10}},
                              {"field_hidden", {32, 64, 128, 256}},
                              {"encoder_hidden", {32, 64, 128, 256}}});
        case Family::nssm:
            return make_grid({{"linear_map", {"plain", "soft_svd"}},
                              {"block", {"linear", "mlp"}},
                              {"q_dx", {0.0, 0.1, 0.2}},
                              {"n_steps", {1, 5, 10, 20, 50}},
                              {"latent_multiplier", {10, 30, 50}}});
        case Family::lssm:
            return make_grid({{"method", {"n4sid", "moesp", "cva"}},
                              {"n_x", {10, 20, 40, 60, 80}},
                              {"horizon", {1, 5, 10, 20, 50}}});
    }
    return {};
}

GridSpec desk_grid(Family f) {
    switch (f) {
        case Family::node:
            return make_grid({{"latent_multiplier", {1, 5}}, {"field_hidden", {32, 128}}, {"encoder_hidden", {32, 128}}});
        case Family::nssm:
            return make_grid({{"linear_map", {"plain", "soft_svd"}},
                              {"block", {"linear", "mlp"}},
                              {"q_dx", {0.0, 0.2}},
                              {"n_steps", {1, 10}},
                              {"latent_multiplier", {10, 30}}});
        case Family::lssm:
            return make_grid({{"method", {"n4sid", "moesp", "cva"}}, {"n_x", {10, 40}}, {"horizon", {5, 20}}});
    }
    return {};
}

BenchConfig make_profile(const std::string& name) {
    BenchConfig c;
    c.profile = name;
    c.systems = builtin_entries();
    if (name == "desk") {
        for (Family f : kFamilies) c.grids[f] = desk_grid(f);
        c.node.epochs = 2000;
        c.node.max_windows = 128;
        c.node.batch_size = 16;
        c.node.eval_every = 50;
        c.nssm.epochs = 1500;
        c.nssm.max_windows = 128;
        c.nssm.eval_every = 50;
    } else if (name == "paper") {
        for (Family f : kFamilies) c.grids[f] = paper_grid(f);
        c.node.epochs = 2000;
        c.nssm.epochs = 5000;
    } else {
        throw ParameterError("unknown profile: " + name + " (expected desk or paper)");
    }
    return c;
}

BenchConfig config_from_json(const json& j, const std::string& default_profile) {
    try {
        if (!j.is_object()) throw SchemaError("config: top level must be an object");
        static const std::set<std::string> known = {"profile", "systems", "families",      "grids",
                                                    "node",    "nssm",    "data_seed",     "seed",
                                                    "seeds",   "nssm_downsample",          "timing_repeats"};
        for (const auto& [k, v] : j.items())
            if (!known.count(k)) throw SchemaError("config: unknown key '" + k + "'");
        BenchConfig c = make_profile(j.value("profile", default_profile));
        if (j.contains("systems")) {
            c.systems.clear();
            for (const auto& s : j.at("systems")) c.systems.push_back(entry_from_json(s));
        }
        if (j.contains("families")) {
            c.families.clear();
            for (const auto& f : j.at("families")) c.families.push_back(family_from_string(f.get<std::string>()));
        }
        if (j.contains("grids")) {
            for (const auto& [fam, axes] : j.at("grids").items()) {
                GridSpec& g = c.grids[family_from_string(fam)];
                for (const auto& [axis, values] : axes.items()) {
                    auto it = std::find_if(g.axes.begin(), g.axes.end(), [&](const GridAxis& a) { return a.name == axis; });
                    if (it == g.axes.end()) throw SchemaError("config: unknown " + fam + " grid axis '" + axis + "'");
                    if (!values.is_array()) throw SchemaError("config: grid axis '" + axis + "' must be an array");
                    it->values.assign(values.begin(), values.end());
                }
            }
        }
        if (j.contains("node")) {
            const json& n = j.at("node");
            c.node.epochs = n.value("epochs", c.node.epochs);
            c.node.lr = n.value("lr", c.node.lr);
            c.node.max_windows = n.value("max_windows", c.node.max_windows);
            c.node.eval_every = n.value("eval_every", c.node.eval_every);
            c.node.batch_size = n.value("batch_size", c.node.batch_size);
            if (n.contains("gradient")) c.node.gradient = gradient_method_from_string(n.at("gradient").get<std::string>());
            if (n.contains("solver")) c.node.solver = solver_from_json(n.at("solver"));
        }
        if (j.contains("nssm")) {
            const json& n = j.at("nssm");
            c.nssm.epochs = n.value("epochs", c.nssm.epochs);
            c.nssm.lr = n.value("lr", c.nssm.lr);
            c.nssm.weight_decay = n.value("weight_decay", c.nssm.weight_decay);
            c.nssm.max_windows = n.value("max_windows", c.nssm.max_windows);
            c.nssm.eval_every = n.value("eval_every", c.nssm.eval_every);
            c.nssm.batch_size = n.value("batch_size", c.nssm.batch_size);
            c.nssm.output_bounds = n.value("output_bounds", c.nssm.output_bounds);
            if (n.contains("activation")) c.nssm.activation = activation_from_string(n.at("activation").get<std::string>());
        }
        c.data_seed = j.value("data_seed", c.data_seed);
        c.seed = j.value("seed", c.seed);
        c.seeds = j.value("seeds", c.seeds);
        c.timing_repeats = j.value("timing_repeats", c.timing_repeats);
        if (j.contains("nssm_downsample")) {
            c.nssm_downsample.clear();
            for (const auto& [sys, factor] : j.at("nssm_downsample").items()) c.nssm_downsample[sys] = factor.get<Index>();
        }
        validate(c);
        return c;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("config: ") + e.what());
    } catch (const ParameterError& e) {
        throw SchemaError(std::string("config: ") + e.what());
    }
}

json to_json(const BenchConfig& c) {
    json systems = json::array();
    for (const auto& s : c.systems) systems.push_back(entry_to_json(s));
    json families = json::array();
    for (Family f : c.families) families.push_back(to_string(f));
    json grids = json::object();
    for (const auto& [f, g] : c.grids) {
        json axes = json::object();
        for (const auto& a : g.axes) axes[a.name] = a.values;
        grids[to_string(f)] = axes;
    }
    json down = json::object();
    for (const auto& [s, k] : c.nssm_downsample) down[s] = k;
    return {{"profile", c.profile},
            {"systems", systems},
            {"families", families},
            {"grids", grids},
            {"node",
             {{"epochs", c.node.epochs},
              {"lr", c.node.lr},
              {"max_windows", c.node.max_windows},
              {"eval_every", c.node.eval_every},
              {"batch_size", c.node.batch_size},
              {"gradient", to_string(c.node.gradient)},
              {"solver", solver_to_json(c.node.solver)}}},
            {"nssm",
             {{"epochs", c.nssm.epochs},
              {"lr", c.nssm.lr},
              {"weight_decay", c.nssm.weight_decay},
              {"max_windows", c.nssm.max_windows},
              {"eval_every", c.nssm.eval_every},
              {"batch_size", c.nssm.batch_size},
              {"output_bounds", c.nssm.output_bounds},
              {"activation", to_string(c.nssm.activation)}}},
            {"data_seed", c.data_seed},
            {"seed", c.seed},
            {"seeds", c.seeds},
            {"nssm_downsample", down},
            {"timing_repeats", c.timing_repeats}};
}

void validate(const BenchConfig& c) {
    if (c.systems.empty()) throw SchemaError("config: no systems");
    std::set<std::string> names;
    const auto known = builtin_names();
    for (const auto& s : c.systems) {
        if (s.name.empty() || s.name.find_first_of("/\\ ") != std::string::npos)
            throw SchemaError("config: invalid system name '" + s.name + "'");
        if (!names.insert(s.name).second) throw SchemaError("config: duplicate system '" + s.name + "'");
        if (s.csv.empty()) {
            if (std::find(known.begin(), known.end(), s.name) == known.end())
                throw SchemaError("config: unknown system '" + s.name + "' and no csv given");
            if (s.n_samples < 0 || (s.n_samples > 0 && s.n_samples < 6))
                throw SchemaError("config: n_samples of '" + s.name + "' must be 0 or >= 6");
        } else if (s.n_y < 1 || s.n_u < 0) {
            throw SchemaError("config: csv system '" + s.name + "' needs n_u >= 0 and n_y >= 1");
        }
    }
    if (c.families.empty()) throw SchemaError("config: no model families");
    for (Family f : c.families) {
        auto it = c.grids.find(f);
        if (it == c.grids.end() || it->second.size() == 0)
            throw SchemaError(std::string("config: empty grid for ") + to_string(f));
        for (const auto& a : it->second.axes)
            if (a.values.empty()) throw SchemaError("config: grid axis '" + a.name + "' is empty");
        for (const auto& p : it->second.points()) check_point(f, p);
    }
    if (c.node.epochs < 1 || c.nssm.epochs < 1) throw SchemaError("config: epochs must be >= 1");
    if (c.node.eval_every < 1 || c.nssm.eval_every < 1) throw SchemaError("config: eval_every must be >= 1");
    if (!(c.node.lr > 0) || !(c.nssm.lr > 0)) throw SchemaError("config: learning rates must be positive");
    if (c.node.max_windows < 0 || c.nssm.max_windows < 0) throw SchemaError("config: max_windows must be >= 0");
    if (c.node.batch_size < 0 || c.nssm.batch_size < 0) throw SchemaError("config: batch_size must be >= 0");
    if (c.seeds < 1) throw SchemaError("config: seeds must be >= 1");
    if (c.timing_repeats != 0 && c.timing_repeats < 3) throw SchemaError("config: timing_repeats must be 0 or >= 3");
    for (const auto& [s, k] : c.nssm_downsample)
        if (k < 1) throw SchemaError("config: downsample factor for '" + s + "' must be >= 1");
    ode::check(c.node.solver);
}

SystemData prepare_system(const SystemEntry& e, std::uint64_t data_seed) {
    SystemData d;
    d.name = e.name;
    if (!e.csv.empty()) {
        d.raw = load_csv(e.csv, e.n_u, e.n_y);
    } else {
        const SystemSpec spec = builtin(e.name);
        const Index n = e.n_samples > 0 ? e.n_samples : spec.n_samples_default;
        d.raw = generate(spec, n, spec.delta_default, spec.input_policy, data_seed);
    }
    d.split = normalize_split(split_thirds(d.raw), &d.stats);
    return d;
}

Index downsample_factor(const std::string& system, Family f, const BenchConfig& c) {
    if (f != Family::nssm) return 1;
    auto it = c.nssm_downsample.find(system);
    return it == c.nssm_downsample.end() ? 1 : it->second;
}

DatasetSplit family_split(const SystemData& d, Family f, const BenchConfig& c) {
    const Index k = downsample_factor(d.name, f, c);
    if (k == 1) return d.split;
    return {downsample(d.split.train, k), downsample(d.split.dev, k), downsample(d.split.test, k)};
}

json to_json(const TrainedModel& m) {
    json model;
    switch (m.family) {
        case Family::node: model = to_json(*m.node); break;
        case Family::nssm: model = to_json(*m.nssm); break;
        case Family::lssm: model = to_json(*m.lssm); break;
    }
    return {{"family", to_string(m.family)}, {"model", model}};
}

TrainedModel trained_model_from_json(const json& j) {
    TrainedModel m;
    try {
        m.family = family_from_string(j.at("family").get<std::string>());
        const json& model = j.at("model");
        switch (m.family) {
            case Family::node: m.node = node_from_json(model); break;
            case Family::nssm: m.nssm = nssm_from_json(model); break;
            case Family::lssm: m.lssm = lssm_from_json(model); break;
        }
    } catch (const json::exception& e) {
        throw SchemaError(std::string("model checkpoint: ") + e.what());
    } catch (const ParameterError& e) {
        throw SchemaError(std::string("model checkpoint: ") + e.what());
    }
    return m;
}

Matrix predict(const TrainedModel& m, const Trajectory& history, const Trajectory& target) {
    switch (m.family) {
        case Family::node: return node_predict(*m.node, history, target);
        case Family::nssm: return nssm_predict(*m.nssm, history, target);
        case Family::lssm: {
            const Lssm& l = *m.lssm;
            const Index w = lssm_warmup(l, history.size());
            const Matrix yw = history.outputs.bottomRows(w), uw = history.inputs.bottomRows(w);
            Vector x = estimate_x0(l, yw, uw);
            x = propagate(l, x, uw);
            return lssm_simulate(l, x, target.inputs);
        }
    }
    throw ParameterError("predict: unknown family");
}

double open_loop_mse(const Matrix& y_hat, const Matrix& y) {
    if (y_hat.rows() != y.rows() || y_hat.cols() != y.cols()) throw ShapeError("open_loop_mse: shape mismatch");
    if (y.size() == 0) throw ShapeError("open_loop_mse: empty outputs");
    return (y_hat - y).squaredNorm() / static_cast<double>(y.size());
}

json to_json(const TrialResult& r) {
    return {{"key", r.key},
            {"system", r.system},
            {"family", to_string(r.family)},
            {"hyper", r.hyper},
            {"seed", r.seed},
            {"index", r.index},
            {"status", r.status},
            {"reason", r.reason},
            {"train_mse", number_or_null(r.train_mse)},
            {"dev_mse", number_or_null(r.dev_mse)},
            {"test_mse", number_or_null(r.test_mse)},
            {"train_seconds", r.train_seconds},
            {"best_epoch", r.best_epoch},
            {"downsample", r.downsample}};
}

TrialResult trial_from_json(const json& j) {
    TrialResult r;
    try {
        r.key = j.at("key").get<std::string>();
        r.system = j.at("system").get<std::string>();
        r.family = family_from_string(j.at("family").get<std::string>());
        r.hyper = j.at("hyper");
        r.seed = j.at("seed").get<std::uint64_t>();
        r.index = j.value("index", Index{0});
        r.status = j.at("status").get<std::string>();
        r.reason = j.value("reason", std::string());
        r.train_mse = number_or_inf(j, "train_mse");
        r.dev_mse = number_or_inf(j, "dev_mse");
        r.test_mse = number_or_inf(j, "test_mse");
        r.train_seconds = j.value("train_seconds", 0.0);
        r.best_epoch = j.value("best_epoch", Index{0});
        r.downsample = j.value("downsample", Index{1});
    } catch (const json::exception& e) {
        throw SchemaError(std::string("trial record: ") + e.what());
    } catch (const ParameterError& e) {
        throw SchemaError(std::string("trial record: ") + e.what());
    }
    return r;
}

std::string trial_key(const std::string& system, Family f, const json& hyper, std::uint64_t seed) {
    std::string h;
    for (const auto& [k, v] : hyper.items()) {
        if (!h.empty()) h += ';';
        h += k + "=" + value_text(v);
    }
    return system + "/" + to_string(f) + "/" + h + "/seed=" + std::to_string(seed);
}

TrialResult run_trial(const SystemData& d, Family f, const json& hyper, std::uint64_t seed, const BenchConfig& c,
                      TrainedModel* model_out) {
    TrialResult r;
    r.system = d.name;
    r.family = f;
    r.hyper = hyper;
    r.seed = seed;
    r.key = trial_key(d.name, f, hyper, seed);
    r.downsample = downsample_factor(d.name, f, c);
    r.train_mse = r.dev_mse = r.test_mse = kInf;
    TrainedModel tm;
    tm.family = f;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        check_point(f, hyper);
        const DatasetSplit split = family_split(d, f, c);
        const Index n_y = split.train.n_y(), n_u = split.train.n_u();
        switch (f) {
            case Family::node: {
                NodeConfig nc;
                nc.n_y = n_y;
                nc.n_u = n_u;
                nc.latent_multiplier = get_index(hyper, "latent_multiplier", 1);
                nc.field_hidden = get_index(hyper, "field_hidden", 1);
                nc.encoder_hidden = get_index(hyper, "encoder_hidden", 0);
                nc.solver = c.node.solver;
                nc.seed = seed;
                NodeModel m = make_node_model(nc);
                NodeTrainConfig tc;
                tc.lr = c.node.lr;
                tc.epochs = c.node.epochs;
                tc.stride = stride_for(split.train.size(), 1, 1, c.node.max_windows);
                tc.eval_every = c.node.eval_every;
                tc.batch_size = c.node.batch_size;
                tc.gradient = c.node.gradient;
                tc.seed = seed;
                r.best_epoch = train_node(m, split, tc).best_epoch;
                tm.node = std::move(m);
                break;
            }
            case Family::nssm: {
                const Index n_steps = get_index(hyper, "n_steps", 1);
                NssmConfig nc;
                nc.n_y = n_y;
                nc.n_u = n_u;
                nc.latent_multiplier = get_index(hyper, "latent_multiplier", 1);
                nc.n_p = n_steps;
                nc.linear_map = linear_map_from_string(get_string(hyper, "linear_map"));
                nc.block = block_kind_from_string(get_string(hyper, "block"));
                nc.activation = c.nssm.activation;
                nc.seed = seed;
                NssmModel m = make_nssm_model(nc);
                NssmTrainConfig tc;
                tc.lr = c.nssm.lr;
                tc.weight_decay = c.nssm.weight_decay;
                tc.epochs = c.nssm.epochs;
                tc.n_steps = n_steps;
                tc.q_dx = get_double(hyper, "q_dx", 0.0);
                tc.output_bounds = c.nssm.output_bounds;
                tc.stride = stride_for(split.train.size(), n_steps, n_steps, c.nssm.max_windows);
                tc.eval_every = c.nssm.eval_every;
                tc.batch_size = c.nssm.batch_size;
                tc.seed = seed;
                r.best_epoch = train_nssm(m, split, tc).best_epoch;
                tm.nssm = std::move(m);
                break;
            }
            case Family::lssm: {
                SubspaceConfig sc;
                sc.method = subspace_method_from_string(get_string(hyper, "method"));
                sc.n_x = get_index(hyper, "n_x", 1);
                sc.horizon = get_index(hyper, "horizon", 1);
                tm.lssm = identify(split.train, sc);
                break;
            }
        }
        r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const Index h = std::min(warmup_rows(tm), split.train.size() - 1);
        r.train_mse = eval_mse(tm, split.train.segment(0, h), split.train.segment(h, split.train.size() - h), d.stats);
        r.dev_mse = eval_mse(tm, split.train, split.dev, d.stats);
        r.test_mse = eval_mse(tm, split.dev, split.test, d.stats);
        // status never looks at the test third, so it cannot steer selection
        if (!std::isfinite(r.train_mse) || !std::isfinite(r.dev_mse)) {
            r.status = "diverged";
            r.reason = "open-loop forecast of the train or dev third is not finite";
        }
        if (model_out) *model_out = std::move(tm);
    } catch (const DivergenceError& e) {
        r.status = "diverged";
        r.reason = e.what();
    } catch (const std::exception& e) {
        r.status = "failed";
        r.reason = e.what();
    }
    if (r.status != "ok")
        r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

MseSpread sensitivity(const std::vector<TrialResult>& trials) {
    MseSpread s;
    std::vector<double> v;
    for (const auto& t : trials) {
        if (t.status == "ok" && std::isfinite(t.test_mse))
            v.push_back(t.test_mse);
        else
            ++s.non_finite;
    }
    s.finite = static_cast<Index>(v.size());
    if (v.empty()) {
        s.mean = s.std = kNaN;
        return s;
    }
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.defined = v.size() >= 2;
    s.std = s.defined ? std::sqrt(ss / static_cast<double>(v.size())) : kNaN;
    return s;
}

InferenceTiming measure_inference(const std::function<void()>& forecast, Index n_samples, Index repeats) {
    if (repeats < 3) throw ParameterError("measure_inference: repeats must be >= 3");
    if (n_samples < 1) throw ParameterError("measure_inference: n_samples must be >= 1");
    using clock = std::chrono::steady_clock;
    forecast();  // warm-up
    InferenceTiming t;
    for (Index r = 0; r < repeats; ++r) {
        const auto a = clock::now();
        forecast();
        t.runs.push_back(std::chrono::duration<double>(clock::now() - a).count());
    }
    t.median_seconds = median(t.runs);
    t.seconds_per_sample = t.median_seconds / static_cast<double>(n_samples);
    // smallest observable clock increment
    double resolution = kInf;
    for (int i = 0; i < 1000 && !(resolution < 1e-7); ++i) {
        const auto a = clock::now();
        auto b = clock::now();
        while (b == a) b = clock::now();
        resolution = std::min(resolution, std::chrono::duration<double>(b - a).count());
    }
    t.unreliable = !(resolution <= 0.01 * t.median_seconds);
    return t;
}

std::map<Family, std::size_t> grid_sizes(const BenchConfig& c) {
    std::map<Family, std::size_t> out;
    for (Family f : c.families) out[f] = c.grids.at(f).size();
    return out;
}

std::vector<TrialResult> load_trials(const fs::path& dir) {
    std::vector<TrialResult> out;
    for (const auto& j : read_jsonl(dir / "trials.jsonl")) out.push_back(trial_from_json(j));
    return out;
}

std::vector<TimingRecord> load_timings(const fs::path& dir) {
    std::vector<TimingRecord> out;
    for (const auto& j : read_jsonl(dir / "timing.jsonl")) {
        try {
            out.push_back({j.at("key").get<std::string>(), number_or_inf(j, "seconds_per_sample"),
                           j.value("unreliable", false)});
        } catch (const json::exception& e) {
            throw SchemaError(std::string("timing record: ") + e.what());
        }
    }
    return out;
}

RunSummary run_benchmark(const BenchConfig& c, const fs::path& dir, const RunOptions& opts) {
    validate(c);
    if (opts.jobs < 1) throw ParameterError("run_benchmark: jobs must be >= 1");
    const fs::path trials_path = dir / "trials.jsonl";
    if (!opts.resume && fs::exists(trials_path) && fs::file_size(trials_path) > 0)
        throw Error("results directory " + dir.string() + " already holds trials; resume or choose another directory");
    trim_torn_tail(trials_path);
    trim_torn_tail(dir / "timing.jsonl");
    fs::create_directories(dir / "data");
    fs::create_directories(dir / "models");
    write_text(dir / "config.json", to_json(c).dump(2) + "\n");

    std::map<std::string, SystemData> data;
    for (const auto& s : c.systems) {
        SystemData d = prepare_system(s, c.data_seed);
        write_csv(dir / "data" / (s.name + ".csv"), d.raw);
        data.emplace(s.name, std::move(d));
    }

    std::set<std::string> done;
    for (const auto& t : load_trials(dir)) done.insert(t.key);

    struct Job {
        const SystemData* data;
        Family family;
        json hyper;
        std::uint64_t seed;
        Index index;
    };
    std::vector<Job> jobs;
    RunSummary summary;
    for (const auto& s : c.systems)
        for (Family f : c.families) {
            Index index = 0;
            for (const auto& p : c.grids.at(f).points())
                for (Index k = 0; k < c.seeds; ++k, ++index) {
                    const std::uint64_t seed = c.seed + static_cast<std::uint64_t>(k);
                    ++summary.planned;
                    if (done.count(trial_key(s.name, f, p, seed))) {
                        ++summary.skipped;
                        continue;
                    }
                    jobs.push_back({&data.at(s.name), f, p, seed, index});
                }
        }

    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::exception_ptr write_error;
    const auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            const Job& job = jobs[i];
            TrainedModel tm;
            TrialResult r = run_trial(*job.data, job.family, job.hyper, job.seed, c, &tm);
            r.index = job.index;
            const std::string model_text = r.status == "ok" ? to_json(tm).dump() : std::string();
            std::lock_guard<std::mutex> lock(mu);
            if (write_error) return;
            try {
                // the model is on disk before the record that marks the trial complete
                if (!model_text.empty()) write_text(dir / "models" / model_file_name(r.key), model_text + "\n");
                append_line(trials_path, to_json(r).dump());
            } catch (...) {
                write_error = std::current_exception();
                return;
            }
            ++summary.ran;
            if (r.status != "ok") ++summary.failed;
            if (opts.log) {
                *opts.log << "[" << summary.ran << "/" << jobs.size() << "] " << r.key << " " << r.status
                          << " dev " << fmt(r.dev_mse) << " test " << fmt(r.test_mse) << " ("
                          << fmt(r.train_seconds) << " s)\n";
                opts.log->flush();
            }
        }
    };
    const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(opts.jobs), jobs.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (write_error) std::rethrow_exception(write_error);

    if (c.timing_repeats > 0) {
        std::set<std::string> timed;
        for (const auto& t : load_timings(dir)) timed.insert(t.key);
        for (const auto& r : load_trials(dir)) {
            if (r.status != "ok" || !std::isfinite(r.test_mse) || timed.count(r.key) || !data.count(r.system)) continue;
            const TrainedModel tm = trained_model_from_json(read_json(dir / "models" / model_file_name(r.key)));
            const DatasetSplit split = family_split(data.at(r.system), r.family, c);
            const InferenceTiming t = measure_inference([&] { (void)predict(tm, split.dev, split.test); },
                                                        split.test.size(), c.timing_repeats);
            append_line(dir / "timing.jsonl", json({{"key", r.key},
                                                    {"seconds_per_sample", t.seconds_per_sample},
                                                    {"unreliable", t.unreliable},
                                                    {"runs", t.runs}})
                                                  .dump());
            timed.insert(r.key);
            ++summary.timed;
            if (opts.log) *opts.log << "timed " << r.key << " " << fmt(t.seconds_per_sample) << " s/sample\n";
        }
    }
    return summary;
}

const FamilySummary* Report::find(const std::string& system, Family f) const {
    for (const auto& s : families)
        if (s.system == system && s.family == f) return &s;
    return nullptr;
}

Report summarize(const std::vector<TrialResult>& trials, const std::vector<TimingRecord>& timings) {
    std::map<std::string, const TimingRecord*> timing_of;
    for (const auto& t : timings) timing_of[t.key] = &t;
    std::map<std::pair<std::string, Family>, std::vector<TrialResult>> groups;
    for (const auto& t : trials) groups[{t.system, t.family}].push_back(t);

    Report rep;
    for (auto& [id, group] : groups) {
        std::sort(group.begin(), group.end(), [](const TrialResult& a, const TrialResult& b) {
            return a.index != b.index ? a.index < b.index : a.key < b.key;
        });
        FamilySummary s;
        s.system = id.first;
        s.family = id.second;
        s.trials = static_cast<Index>(group.size());
        s.spread = sensitivity(group);
        s.best_dev_mse = s.best_test_mse = kNaN;
        // selection sees dev MSE only
        const TrialResult* best = nullptr;
        for (const auto& t : group)
            if (t.status == "ok" && std::isfinite(t.dev_mse) && (!best || t.dev_mse < best->dev_mse)) best = &t;
        if (best) {
            s.best_key = best->key;
            s.best_dev_mse = best->dev_mse;
            s.best_test_mse = best->test_mse;
        }
        std::vector<double> times;
        for (const auto& t : group) {
            auto it = timing_of.find(t.key);
            if (it == timing_of.end() || !std::isfinite(it->second->seconds_per_sample)) continue;
            times.push_back(it->second->seconds_per_sample);
            s.timing_unreliable = s.timing_unreliable || it->second->unreliable;
        }
        s.median_seconds_per_sample = times.empty() ? kNaN : median(times);
        rep.families.push_back(std::move(s));
    }

    std::set<std::string> systems;
    for (const auto& s : rep.families) systems.insert(s.system);
    const auto ratio = [](double a, double b) -> std::optional<double> {
        if (!std::isfinite(a) || !std::isfinite(b) || b == 0.0) return std::nullopt;
        return a / b;
    };
    for (const auto& sys : systems) {
        RatioRow row;
        row.system = sys;
        const FamilySummary* node = rep.find(sys, Family::node);
        const FamilySummary* nssm = rep.find(sys, Family::nssm);
        const FamilySummary* lssm = rep.find(sys, Family::lssm);
        if (node && nssm) {
            row.node_over_nssm = ratio(node->best_test_mse, nssm->best_test_mse);
            if (node->spread.defined && nssm->spread.defined) row.std_node_over_nssm = ratio(node->spread.std, nssm->spread.std);
            row.time_node_over_nssm = ratio(node->median_seconds_per_sample, nssm->median_seconds_per_sample);
        }
        if (node && lssm) row.node_over_lssm = ratio(node->best_test_mse, lssm->best_test_mse);
        rep.ratios.push_back(row);
    }
    return rep;
}

std::string summary_csv(const Report& r) {
    std::ostringstream os;
    os << "system,family,trials,finite,non_finite,best_key,best_dev_mse,best_test_mse,mean_test_mse,std_test_mse,"
          "std_defined,median_seconds_per_sample,timing_unreliable\n";
    for (const auto& s : r.families)
        os << s.system << ',' << to_string(s.family) << ',' << s.trials << ',' << s.spread.finite << ','
           << s.spread.non_finite << ',' << csv_field(s.best_key) << ',' << fmt(s.best_dev_mse) << ','
           << fmt(s.best_test_mse) << ',' << fmt(s.spread.mean) << ',' << fmt(s.spread.std) << ','
           << (s.spread.defined ? 1 : 0) << ',' << fmt(s.median_seconds_per_sample) << ','
           << (s.timing_unreliable ? 1 : 0) << '\n';
    return os.str();
}

std::string ratios_csv(const Report& r) {
    const auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
    std::ostringstream os;
    os << "system,node_over_nssm_test_mse,node_over_lssm_test_mse,node_over_nssm_std,node_over_nssm_seconds_per_sample\n";
    for (const auto& row : r.ratios)
        os << row.system << ',' << opt(row.node_over_nssm) << ',' << opt(row.node_over_lssm) << ','
           << opt(row.std_node_over_nssm) << ',' << opt(row.time_node_over_nssm) << '\n';
    return os.str();
}

Report emit_report(const fs::path& results, const fs::path& out) {
    const BenchConfig c = config_from_json(read_json(results / "config.json"));
    std::vector<TrialResult> trials = load_trials(results);
    if (trials.empty()) throw Error("no trials in " + results.string());
    const std::vector<TimingRecord> timings = load_timings(results);
    const Report rep = summarize(trials, timings);

    fs::create_directories(out / "trajectories");
    std::sort(trials.begin(), trials.end(), [](const TrialResult& a, const TrialResult& b) {
        return std::tie(a.system, a.family, a.index, a.key) < std::tie(b.system, b.family, b.index, b.key);
    });
    std::map<std::string, double> time_of;
    for (const auto& t : timings) time_of[t.key] = t.seconds_per_sample;
    std::ostringstream res;
    res << "key,system,family,seed,status,train_mse,dev_mse,test_mse,train_seconds,best_epoch,downsample,"
           "seconds_per_sample,reason\n";
    for (const auto& t : trials) {
        auto it = time_of.find(t.key);
        res << csv_field(t.key) << ',' << t.system << ',' << to_string(t.family) << ',' << t.seed << ',' << t.status
            << ',' << fmt(t.train_mse) << ',' << fmt(t.dev_mse) << ',' << fmt(t.test_mse) << ','
            << fmt(t.train_seconds) << ',' << t.best_epoch << ',' << t.downsample << ','
            << (it == time_of.end() ? std::string("nan") : fmt(it->second)) << ',' << csv_field(t.reason) << '\n';
    }
    write_text(out / "results.csv", res.str());
    write_text(out / "summary.csv", summary_csv(rep));
    write_text(out / "ratios.csv", ratios_csv(rep));

    std::ostringstream plot;
    plot << "system,family,metric,value\n";
    for (const auto& s : rep.families) {
        const std::string head = s.system + "," + to_string(s.family) + ",";
        plot << head << "best_dev_mse," << fmt(s.best_dev_mse) << '\n'
             << head << "best_test_mse," << fmt(s.best_test_mse) << '\n'
             << head << "mean_test_mse," << fmt(s.spread.mean) << '\n'
             << head << "std_test_mse," << fmt(s.spread.std) << '\n'
             << head << "median_seconds_per_sample," << fmt(s.median_seconds_per_sample) << '\n';
    }
    for (const auto& t : trials) plot << t.system << ',' << to_string(t.family) << ",trial_test_mse," << fmt(t.test_mse) << '\n';
    write_text(out / "plot.csv", plot.str());

    std::ostringstream header;
    header << "profile " << c.profile << "\nseeds " << c.seeds << " (first " << c.seed << "), data seed " << c.data_seed
           << "\ntrials " << trials.size() << ", timed " << timings.size() << "\n";
    write_text(out / "report.txt", header.str());

    // dev-best forecasts of the test third, denormalized, in the data CSV format
    for (const auto& entry : c.systems) {
        const fs::path data_csv = results / "data" / (entry.name + ".csv");
        if (!fs::exists(data_csv)) continue;
        Index n_u = entry.n_u, n_y = entry.n_y;
        if (entry.csv.empty()) {
            const SystemSpec spec = builtin(entry.name);
            n_u = spec.n_u;
            n_y = spec.n_y;
        }
        SystemData d;
        d.name = entry.name;
        d.raw = load_csv(data_csv, n_u, n_y);
        d.split = normalize_split(split_thirds(d.raw), &d.stats);
        write_csv(out / "trajectories" / (entry.name + "_true.csv"), denormalize(d.split.test, d.stats));
        for (Family f : kFamilies) {
            const FamilySummary* s = rep.find(entry.name, f);
            if (!s || s->best_key.empty()) continue;
            const fs::path model_path = results / "models" / model_file_name(s->best_key);
            if (!fs::exists(model_path)) continue;
            const TrainedModel tm = trained_model_from_json(read_json(model_path));
            const DatasetSplit split = family_split(d, f, c);
            Trajectory pred = split.test;
            try {
                pred.outputs = predict(tm, split.dev, split.test);
            } catch (const DivergenceError&) {
                continue;
            }
            if (!pred.outputs.allFinite()) continue;
            write_csv(out / "trajectories" / (entry.name + "_" + to_string(f) + ".csv"), denormalize(pred, d.stats));
        }
    }
    return rep;
}

}  // namespace sysid
