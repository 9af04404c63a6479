#pragma once

// Uniformly sampled input/output trajectories and the dataset plumbing around
// them: CSV interchange, equal-thirds splitting, decimation, normalization and
// sliding windows.

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <vector>

namespace sysid {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// One batch of uniformly sampled data. Rows of `inputs`/`outputs` are samples.
struct Trajectory {
    double delta = 0.0;
    Vector times;
    Matrix inputs;   // N x n_u
    Matrix outputs;  // N x n_y

    [[nodiscard]] Index size() const { return outputs.rows(); }
    [[nodiscard]] Index n_u() const { return inputs.cols(); }
    [[nodiscard]] Index n_y() const { return outputs.cols(); }

    /// Contiguous rows [begin, begin+count).
    [[nodiscard]] Trajectory segment(Index begin, Index count) const;
};

/// Builds a trajectory on the grid t0 + k*delta and validates it.
Trajectory make_trajectory(double delta, Matrix inputs, Matrix outputs, double t0 = 0.0);

/// Throws GridError/DataError/ShapeError when an invariant of Trajectory fails.
void validate(const Trajectory& tr);

struct DatasetSplit {
    Trajectory train;
    Trajectory dev;
    Trajectory test;
};

struct Window {
    Index start = 0;        // index of the first future row
    Matrix past_outputs;    // n_p x n_y, rows [start-n_p, start)
    Matrix past_inputs;     // n_p x n_u, rows [start-n_p, start)
    Matrix future_inputs;   // n_steps x n_u, rows [start, start+n_steps)
    Matrix future_outputs;  // n_steps x n_y
};

struct NormStats {
    Vector input_mean, input_std;
    Vector output_mean, output_std;
    bool constant_channel = false;
};

inline constexpr double kStdFloor = 1e-12;

Trajectory load_csv(const std::filesystem::path& path, Index n_u, Index n_y);
void write_csv(const std::filesystem::path& path, const Trajectory& tr);
std::string to_csv(const Trajectory& tr);
Trajectory parse_csv(const std::string& text, Index n_u, Index n_y);

DatasetSplit split_thirds(const Trajectory& tr);
Trajectory concatenate(const DatasetSplit& split);

Trajectory downsample(const Trajectory& tr, Index factor);

/// Statistics of `tr`; population standard deviation floored at kStdFloor.
NormStats fit_norm(const Trajectory& tr);
Trajectory apply_norm(const Trajectory& tr, const NormStats& stats);
Trajectory denormalize(const Trajectory& tr, const NormStats& stats);
Matrix denormalize_outputs(const Matrix& outputs, const NormStats& stats);

struct Normalized {
    Trajectory trajectory;
    NormStats stats;
};
Normalized normalize(const Trajectory& tr);

/// Normalizes all thirds with statistics of the training third only.
DatasetSplit normalize_split(const DatasetSplit& split, NormStats* stats_out = nullptr);

std::vector<Window> windows(const Trajectory& tr, Index n_p, Index n_steps, Index stride = 1);

/// Number of windows produced by windows() without materializing them.
Index window_count(Index n, Index n_p, Index n_steps, Index stride);

/// Column-stacked batch of windows: each column is one window.
struct WindowBatch {
    Matrix past_outputs;    // (n_p*n_y) x B, oldest row first
    Matrix past_inputs;     // (n_p*n_u) x B
    std::vector<Matrix> future_inputs;   // n_steps entries of n_u x B
    std::vector<Matrix> future_outputs;  // n_steps entries of n_y x B
    [[nodiscard]] Index batch() const { return past_outputs.cols(); }
    [[nodiscard]] Index steps() const { return static_cast<Index>(future_outputs.size()); }
};
WindowBatch stack(const std::vector<Window>& ws);

}  // namespace sysid
