#include "sysid/data.hpp"

#include "sysid/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sysid {

namespace {

constexpr double kGridTol = 1e-9;

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::string expected_header(Index n_u, Index n_y) {
    std::string h = "t";
    for (Index i = 1; i <= n_u; ++i) h += ",u" + std::to_string(i);
    for (Index i = 1; i <= n_y; ++i) h += ",y" + std::to_string(i);
    return h;
}

void append_number(std::string& out, double v) {
    char buf[40];
    int n = std::snprintf(buf, sizeof buf, "%.12g", v);
    out.append(buf, static_cast<std::size_t>(n));
}

}  // namespace

Trajectory Trajectory::segment(Index begin, Index count) const {
    Trajectory s;
    s.delta = delta;
    s.times = times.segment(begin, count);
    s.inputs = inputs.middleRows(begin, count);
    s.outputs = outputs.middleRows(begin, count);
    return s;
}

void validate(const Trajectory& tr) {
    const Index n = tr.outputs.rows();
    if (tr.inputs.rows() != n || tr.times.size() != n)
        throw ShapeError("trajectory: inputs, outputs and times must have the same row count");
    if (n < 2) throw TooShortError("trajectory: at least 2 samples required");
    if (!(tr.delta > 0.0) || !std::isfinite(tr.delta)) throw GridError("trajectory: delta must be positive");
    for (Index k = 0; k + 1 < n; ++k) {
        const double step = tr.times(k + 1) - tr.times(k);
        const double tol = kGridTol * std::max({std::abs(tr.times(k)), std::abs(tr.times(k + 1)), tr.delta});
        if (!(std::abs(step - tr.delta) <= tol))
            throw GridError("trajectory: non-uniform time grid at row " + std::to_string(k + 1));
    }
    for (Index k = 0; k < n; ++k) {
        if (!tr.inputs.row(k).allFinite() || !tr.outputs.row(k).allFinite())
            throw DataError("trajectory: non-finite value at row " + std::to_string(k), static_cast<long>(k));
    }
}

Trajectory make_trajectory(double delta, Matrix inputs, Matrix outputs, double t0) {
    Trajectory tr;
    tr.delta = delta;
    tr.inputs = std::move(inputs);
    tr.outputs = std::move(outputs);
    const Index n = tr.outputs.rows();
    tr.times.resize(n);
    for (Index k = 0; k < n; ++k) tr.times(k) = t0 + static_cast<double>(k) * delta;
    validate(tr);
    return tr;
}

std::string to_csv(const Trajectory& tr) {
    std::string out = expected_header(tr.n_u(), tr.n_y());
    out += '\n';
    out.reserve(out.size() + static_cast<std::size_t>(tr.size() * (tr.n_u() + tr.n_y() + 1) * 16));
    for (Index k = 0; k < tr.size(); ++k) {
        append_number(out, tr.times(k));
        for (Index j = 0; j < tr.n_u(); ++j) {
            out += ',';
            append_number(out, tr.inputs(k, j));
        }
        for (Index j = 0; j < tr.n_y(); ++j) {
            out += ',';
            append_number(out, tr.outputs(k, j));
        }
        out += '\n';
    }
    return out;
}

void write_csv(const std::filesystem::path& path, const Trajectory& tr) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open for writing: " + path.string());
    f << to_csv(tr);
    if (!f) throw Error("write failed: " + path.string());
}

Trajectory parse_csv(const std::string& text, Index n_u, Index n_y) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("csv: empty file");
    if (!line.empty() && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
    {
        auto fields = split_fields(line);
        std::string got;
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) got += ',';
            got += trim(fields[i]);
        }
        if (got != expected_header(n_u, n_y))
            throw SchemaError("csv: header '" + got + "' does not match '" + expected_header(n_u, n_y) + "'");
    }
    const std::size_t cols = static_cast<std::size_t>(1 + n_u + n_y);
    std::vector<double> values;
    long row = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        auto fields = split_fields(line);
        if (fields.size() != cols)
            throw SchemaError("csv: data row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                              " fields, expected " + std::to_string(cols));
        for (auto f : fields) {
            f = trim(f);
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
            if (ec != std::errc() || ptr != f.data() + f.size())
                throw DataError("csv: unparsable value '" + std::string(f) + "' in data row " + std::to_string(row), row);
            if (!std::isfinite(v)) throw DataError("csv: non-finite value in data row " + std::to_string(row), row);
            values.push_back(v);
        }
        ++row;
    }
    if (row < 2) throw TooShortError("csv: at least 2 data rows required");
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> table(
        values.data(), row, static_cast<Index>(cols));
    Trajectory tr;
    tr.times = table.col(0);
    tr.inputs = table.middleCols(1, n_u);
    tr.outputs = table.middleCols(1 + n_u, n_y);
    tr.delta = tr.times(1) - tr.times(0);
    validate(tr);
    return tr;
}

Trajectory load_csv(const std::filesystem::path& path, Index n_u, Index n_y) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open: " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_csv(ss.str(), n_u, n_y);
}

DatasetSplit split_thirds(const Trajectory& tr) {
    const Index n = tr.size();
    if (n < 6) throw TooShortError("split_thirds: need at least 6 samples, got " + std::to_string(n));
    const Index base = n / 3;
    const Index rem = n % 3;
    const Index n_train = base + (rem >= 1 ? 1 : 0);
    const Index n_dev = base + (rem >= 2 ? 1 : 0);
    return {tr.segment(0, n_train), tr.segment(n_train, n_dev), tr.segment(n_train + n_dev, base)};
}

Trajectory concatenate(const DatasetSplit& split) {
    const Index n = split.train.size() + split.dev.size() + split.test.size();
    Trajectory out;
    out.delta = split.train.delta;
    out.times.resize(n);
    out.times << split.train.times, split.dev.times, split.test.times;
    out.inputs.resize(n, split.train.n_u());
    out.outputs.resize(n, split.train.n_y());
    out.inputs << split.train.inputs, split.dev.inputs, split.test.inputs;
    out.outputs << split.train.outputs, split.dev.outputs, split.test.outputs;
    return out;
}

Trajectory downsample(const Trajectory& tr, Index factor) {
    if (factor < 1) throw ParameterError("downsample: factor must be >= 1");
    if (factor == 1) return tr;
    const Index n = (tr.size() + factor - 1) / factor;
    Trajectory out;
    out.delta = tr.delta * static_cast<double>(factor);
    out.times.resize(n);
    out.inputs.resize(n, tr.n_u());
    out.outputs.resize(n, tr.n_y());
    for (Index k = 0; k < n; ++k) {
        out.times(k) = tr.times(k * factor);
        out.inputs.row(k) = tr.inputs.row(k * factor);
        out.outputs.row(k) = tr.outputs.row(k * factor);
    }
    return out;
}

namespace {

void column_stats(const Matrix& m, Vector& mean, Vector& sd, bool& constant) {
    mean = m.colwise().mean().transpose();
    sd.resize(m.cols());
    for (Index j = 0; j < m.cols(); ++j) {
        const double var = (m.col(j).array() - mean(j)).square().mean();
        double s = std::sqrt(var);
        if (!(s >= kStdFloor)) {
            s = kStdFloor;
            constant = true;
        }
        sd(j) = s;
    }
}

}  // namespace

NormStats fit_norm(const Trajectory& tr) {
    if (tr.size() < 2) throw TooShortError("normalize: at least 2 samples required");
    NormStats s;
    column_stats(tr.inputs, s.input_mean, s.input_std, s.constant_channel);
    column_stats(tr.outputs, s.output_mean, s.output_std, s.constant_channel);
    return s;
}

Trajectory apply_norm(const Trajectory& tr, const NormStats& stats) {
    Trajectory out = tr;
    out.inputs = (tr.inputs.rowwise() - stats.input_mean.transpose()).array().rowwise() /
                 stats.input_std.transpose().array();
    out.outputs = (tr.outputs.rowwise() - stats.output_mean.transpose()).array().rowwise() /
                  stats.output_std.transpose().array();
    return out;
}

Matrix denormalize_outputs(const Matrix& outputs, const NormStats& stats) {
    return (outputs.array().rowwise() * stats.output_std.transpose().array()).rowwise() +
           stats.output_mean.transpose().array();
}

Trajectory denormalize(const Trajectory& tr, const NormStats& stats) {
    Trajectory out = tr;
    out.inputs = (tr.inputs.array().rowwise() * stats.input_std.transpose().array()).rowwise() +
                 stats.input_mean.transpose().array();
    out.outputs = denormalize_outputs(tr.outputs, stats);
    return out;
}

Normalized normalize(const Trajectory& tr) {
    Normalized n;
    n.stats = fit_norm(tr);
    n.trajectory = apply_norm(tr, n.stats);
    return n;
}

DatasetSplit normalize_split(const DatasetSplit& split, NormStats* stats_out) {
    const NormStats stats = fit_norm(split.train);
    if (stats_out) *stats_out = stats;
    return {apply_norm(split.train, stats), apply_norm(split.dev, stats), apply_norm(split.test, stats)};
}

Index window_count(Index n, Index n_p, Index n_steps, Index stride) {
    if (n_p < 1 || n_steps < 1 || stride < 1) throw ParameterError("windows: n_p, n_steps and stride must be >= 1");
    if (n_p + n_steps > n)
        throw TooShortError("windows: n_p + n_steps = " + std::to_string(n_p + n_steps) + " exceeds length " +
                            std::to_string(n));
    return (n - n_p - n_steps) / stride + 1;
}

std::vector<Window> windows(const Trajectory& tr, Index n_p, Index n_steps, Index stride) {
    const Index count = window_count(tr.size(), n_p, n_steps, stride);
    std::vector<Window> out;
    out.reserve(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) {
        const Index k = n_p + i * stride;
        Window w;
        w.start = k;
        w.past_outputs = tr.outputs.middleRows(k - n_p, n_p);
        w.past_inputs = tr.inputs.middleRows(k - n_p, n_p);
        w.future_inputs = tr.inputs.middleRows(k, n_steps);
        w.future_outputs = tr.outputs.middleRows(k, n_steps);
        out.push_back(std::move(w));
    }
    return out;
}

WindowBatch stack(const std::vector<Window>& ws) {
    if (ws.empty()) throw ParameterError("stack: no windows");
    const Index b = static_cast<Index>(ws.size());
    const Index n_p = ws[0].past_outputs.rows();
    const Index n_y = ws[0].past_outputs.cols();
    const Index n_u = ws[0].past_inputs.cols();
    const Index steps = ws[0].future_outputs.rows();
    WindowBatch batch;
    batch.past_outputs.resize(n_p * n_y, b);
    batch.past_inputs.resize(n_p * n_u, b);
    batch.future_inputs.assign(static_cast<std::size_t>(steps), Matrix(n_u, b));
    batch.future_outputs.assign(static_cast<std::size_t>(steps), Matrix(n_y, b));
    for (Index j = 0; j < b; ++j) {
        const Window& w = ws[static_cast<std::size_t>(j)];
        if (w.past_outputs.rows() != n_p || w.future_outputs.rows() != steps)
            throw ShapeError("stack: windows of different shapes");
        for (Index r = 0; r < n_p; ++r) {
            batch.past_outputs.block(r * n_y, j, n_y, 1) = w.past_outputs.row(r).transpose();
            if (n_u > 0) batch.past_inputs.block(r * n_u, j, n_u, 1) = w.past_inputs.row(r).transpose();
        }
        for (Index s = 0; s < steps; ++s) {
            batch.future_outputs[static_cast<std::size_t>(s)].col(j) = w.future_outputs.row(s).transpose();
            if (n_u > 0) batch.future_inputs[static_cast<std::size_t>(s)].col(j) = w.future_inputs.row(s).transpose();
        }
    }
    return batch;
}

}  // namespace sysid
