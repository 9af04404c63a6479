#pragma once

// Grid-search benchmark of the three model families (NODE, NSSM, LSSM) on
// emulated or CSV-loaded systems: trial execution with an append-only log,
// a serial inference-timing pass, and a report folded from the persisted log.

#include "sysid/data.hpp"
#include "sysid/node.hpp"
#include "sysid/nssm.hpp"
#include "sysid/subspace.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sysid {

enum class Family { node, nssm, lssm };

const char* to_string(Family f);
Family family_from_string(const std::string& s);
inline constexpr Family kFamilies[] = {Family::node, Family::nssm, Family::lssm};

struct GridAxis {
    std::string name;
    std::vector<nlohmann::json> values;
};

/// Cartesian product of axes; the last axis varies fastest.
struct GridSpec {
    std::vector<GridAxis> axes;

    [[nodiscard]] std::size_t size() const;
    [[nodiscard]] std::vector<nlohmann::json> points() const;  // one object per combination
};

GridSpec paper_grid(Family f);
GridSpec desk_grid(Family f);

struct SystemEntry {
    std::string name;
    std::string csv;        // empty: built-in emulator
    Index n_u = 0, n_y = 0; // required with csv
    Index n_samples = 0;    // emulator only; 0: system default
};

struct NodeBenchSettings {
    Index epochs = 2000;
    double lr = 0.01;
    Index max_windows = 0;  // stride chosen so at most this many training windows; 0: all
    Index eval_every = 10;
    Index batch_size = 0;   // 0: full batch
    GradientMethod gradient = GradientMethod::adjoint;
    ode::SolverConfig solver{};
};

struct NssmBenchSettings {
    Index epochs = 5000;
    double lr = 0.003;
    double weight_decay = 0.01;
    Index max_windows = 0;
    Index eval_every = 10;
    Index batch_size = 0;
    bool output_bounds = false;
    Activation activation = Activation::tanh;
};

struct BenchConfig {
    std::string profile = "desk";
    std::vector<SystemEntry> systems;
    std::vector<Family> families{Family::node, Family::nssm, Family::lssm};
    std::map<Family, GridSpec> grids;
    NodeBenchSettings node;
    NssmBenchSettings nssm;
    std::uint64_t data_seed = 0;
    std::uint64_t seed = 0;
    Index seeds = 1;                                  // trials per grid point, seeds seed..seed+seeds-1
    std::map<std::string, Index> nssm_downsample{{"tank", 10}, {"vehicle", 8}};
    Index timing_repeats = 3;                         // 0 disables the timing pass
};

/// Built-in profiles "desk" and "paper" over the seven emulated systems.
BenchConfig make_profile(const std::string& name);

/// Profile named by j["profile"] (or `default_profile`) with the fields of `j` applied on top.
BenchConfig config_from_json(const nlohmann::json& j, const std::string& default_profile = "desk");
nlohmann::json to_json(const BenchConfig& c);
void validate(const BenchConfig& c);

/// Data of one system: raw trajectory, normalization of the train third, normalized split.
struct SystemData {
    std::string name;
    Trajectory raw;
    NormStats stats;
    DatasetSplit split;  // normalized
};

SystemData prepare_system(const SystemEntry& e, std::uint64_t data_seed);

/// Split a family trains on: NSSM thirds are decimated by the configured factor, others untouched.
DatasetSplit family_split(const SystemData& d, Family f, const BenchConfig& c);
Index downsample_factor(const std::string& system, Family f, const BenchConfig& c);

struct TrainedModel {
    Family family = Family::lssm;
    std::optional<NodeModel> node;
    std::optional<NssmModel> nssm;
    std::optional<Lssm> lssm;
};

nlohmann::json to_json(const TrainedModel& m);
TrainedModel trained_model_from_json(const nlohmann::json& j);

/// Open-loop prediction (normalized units) of every row of `target`, warmed up on the tail of `history`.
Matrix predict(const TrainedModel& m, const Trajectory& history, const Trajectory& target);

/// Mean of the N*n_y squared residuals.
double open_loop_mse(const Matrix& y_hat, const Matrix& y);

struct TrialResult {
    std::string key;
    std::string system;
    Family family = Family::lssm;
    nlohmann::json hyper;
    std::uint64_t seed = 0;
    Index index = 0;            // position in the enumeration order
    std::string status = "ok";  // ok | diverged | failed
    std::string reason;
    double train_mse = 0.0, dev_mse = 0.0, test_mse = 0.0;  // denormalized; +inf when unavailable
    double train_seconds = 0.0;
    Index best_epoch = 0;
    Index downsample = 1;
};

nlohmann::json to_json(const TrialResult& r);
TrialResult trial_from_json(const nlohmann::json& j);

std::string trial_key(const std::string& system, Family f, const nlohmann::json& hyper, std::uint64_t seed);

/// Trains and evaluates one grid point; never throws for training or evaluation failures.
TrialResult run_trial(const SystemData& d, Family f, const nlohmann::json& hyper, std::uint64_t seed,
                      const BenchConfig& c, TrainedModel* model_out = nullptr);

struct MseSpread {
    double mean = 0.0;
    double std = 0.0;  // population standard deviation over finite trials
    Index finite = 0;
    Index non_finite = 0;
    bool defined = false;  // at least two finite trials
};

MseSpread sensitivity(const std::vector<TrialResult>& trials);

struct InferenceTiming {
    double seconds_per_sample = 0.0;
    double median_seconds = 0.0;
    std::vector<double> runs;  // seconds per repeat, warm-up excluded
    bool unreliable = false;   // timer resolution above 1% of the median run
};

/// Median over `repeats` (>= 3) timed calls of `forecast` after one untimed warm-up.
InferenceTiming measure_inference(const std::function<void()>& forecast, Index n_samples, Index repeats = 3);

struct TimingRecord {
    std::string key;
    double seconds_per_sample = 0.0;
    bool unreliable = false;
};

struct RunOptions {
    Index jobs = 1;
    bool resume = false;
    std::ostream* log = nullptr;
};

struct RunSummary {
    Index planned = 0;
    Index skipped = 0;  // already in the log
    Index ran = 0;
    Index failed = 0;   // status != ok among the trials run now
    Index timed = 0;
};

/// Grid counts per family as enumerated for `c` (per system, per seed).
std::map<Family, std::size_t> grid_sizes(const BenchConfig& c);

/// Runs every missing trial of `c` into `dir` (config.json, data/, models/, trials.jsonl, timing.jsonl).
RunSummary run_benchmark(const BenchConfig& c, const std::filesystem::path& dir, const RunOptions& opts = {});

std::vector<TrialResult> load_trials(const std::filesystem::path& dir);
std::vector<TimingRecord> load_timings(const std::filesystem::path& dir);

struct FamilySummary {
    std::string system;
    Family family = Family::lssm;
    Index trials = 0;
    std::string best_key;
    double best_dev_mse = 0.0;
    double best_test_mse = 0.0;
    MseSpread spread;
    double median_seconds_per_sample = 0.0;  // NaN without timing
    bool timing_unreliable = false;
};

struct RatioRow {
    std::string system;
    std::optional<double> node_over_nssm;  // best test MSE ratios
    std::optional<double> node_over_lssm;
    std::optional<double> std_node_over_nssm;
    std::optional<double> time_node_over_nssm;
};

struct Report {
    std::vector<FamilySummary> families;
    std::vector<RatioRow> ratios;

    [[nodiscard]] const FamilySummary* find(const std::string& system, Family f) const;
};

/// Pure fold of trials and timings: dev-best selection, spread, median timing, ratios.
Report summarize(const std::vector<TrialResult>& trials, const std::vector<TimingRecord>& timings);

std::string summary_csv(const Report& r);
std::string ratios_csv(const Report& r);

/// Writes results.csv, summary.csv, ratios.csv, plot.csv and trajectories/ (dev-best
/// test forecasts in the data CSV format) for the benchmark directory `results`.
Report emit_report(const std::filesystem::path& results, const std::filesystem::path& out);

}  // namespace sysid
