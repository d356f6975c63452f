// SPDX-License-Identifier: Apache-2.0
//
// Zero-shot evaluation: per-task RMSE statistics, histograms, long-horizon
// iterative inference and two-column benchmark series.
//
// Output files written by emit_report (UTF-8, comma separated, LF, header row):
//   report.json    every statistic plus the histogram
//   per_task.csv   task_id,rmse
//   histogram.csv  lower_edge,upper_edge,count   (one row per bin, empty bins included)
//   histogram.svg  static bar plot
// Reals are written in shortest round-trip form.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ricl/json_util.hpp"
#include "ricl/metamodel.hpp"

namespace ricl {

struct Histogram {
    std::vector<double> bin_edges;
    std::vector<std::int64_t> counts;
};

struct HistogramSpec {
    int bins = 100;
    /// Upper edge; defaults to the largest value (or 1 when all are 0).
    std::optional<double> upper;
};

/// Uniform bins over [0, upper]; the last bin is closed. Values above `upper`
/// land in the last bin, negative values in the first.
Histogram make_histogram(std::span<const double> values, const HistogramSpec& spec = {});

struct TaskRmse {
    std::int64_t task_id = 0;
    double rmse = 0.0;
};

struct EvalReport {
    std::int64_t n_tasks = 0;
    double mean_rmse = 0.0;
    double median_rmse = 0.0;
    double tail_mean_rmse = 0.0;
    double tail_fraction_used = 0.4;
    std::int64_t tail_count = 0;
    std::vector<TaskRmse> per_task;
    Histogram histogram;
};

/// Number of tasks in the evaluation tail: ceil(q N), at least 1.
std::size_t eval_tail_count(double tail_fraction, std::size_t n);

/// Statistics over per-task RMSEs; task ids are 0..N-1. Results do not depend
/// on the order of `rmses` apart from the id labelling.
EvalReport summarize_rmse(std::span<const double> rmses, double tail_fraction, const HistogramSpec& hist = {});

/// RMSE between each task's target and the predicted mean.
std::vector<double> task_rmses(const Predictor& model, std::span<const TaskDataset> tasks, int threads = 1);

EvalReport evaluate_batch(const Predictor& model, std::span<const TaskDataset> tasks, double tail_fraction,
                          const HistogramSpec& hist = {}, int threads = 1);

/// Long-horizon simulation by consecutive non-overlapping chunks. The first
/// chunk uses `y_init` as its c initial outputs; later chunks use the last c
/// predictions before them. Returns predictions for long_u[c..).
std::vector<double> iterative_inference(const Predictor& model, std::span<const double> context_u,
                                        std::span<const double> context_y, std::span<const double> long_u,
                                        std::span<const double> y_init, int chunk = 100);

/// Number of chunks iterative_inference uses for a series of length `len`.
std::size_t chunk_count(std::size_t len, int c, int chunk);

struct BenchmarkSeries {
    std::string name;
    std::vector<double> u;
    std::vector<double> y;

    std::size_t sample_count() const { return u.size(); }
    /// Throws ArgumentError on unequal lengths or non-finite values.
    void validate() const;
};

struct BenchmarkOptions {
    int context_len = 400;  // m
    int init_len = 30;      // c
    int chunk = 100;
    /// Scale u and y by the training series mean/std before inference and
    /// map predictions back; RMSE is reported in the original units.
    bool standardize = true;
};

struct SeriesResult {
    std::string name;
    /// Mean over contexts of the pooled RMSE of one full simulation.
    double rmse = 0.0;
    std::vector<double> per_context_rmse;
    /// sqrt of the mean over contexts of the squared error at each step.
    std::vector<double> per_step_rmse;
    std::size_t n_chunks = 0;
};

struct BenchmarkReport {
    std::size_t n_contexts = 0;
    BenchmarkOptions options;
    std::vector<SeriesResult> series;
};

std::size_t context_count(std::size_t train_len, int context_len);

BenchmarkReport run_benchmark(const Predictor& model, const BenchmarkSeries& train,
                              std::span<const BenchmarkSeries> tests, const BenchmarkOptions& options,
                              int threads = 1);

/// Column selector: zero-based index or header name.
using ColumnRef = std::variant<std::size_t, std::string>;

/// Reads two numeric columns. A first row that does not parse as numbers is
/// taken as the header. Throws IoError when unreadable, SchemaError on an
/// empty file or missing column, ParseError (with the line) on a bad row.
BenchmarkSeries load_two_column_csv(const std::filesystem::path& path, const ColumnRef& u_column,
                                    const ColumnRef& y_column, char delimiter = ',');

class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what) : std::runtime_error(what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

json to_json(const EvalReport& report);
json to_json(const BenchmarkReport& report);

/// Shortest round-trip decimal form.
std::string format_real(double v);

void emit_report(const EvalReport& report, const std::filesystem::path& out_dir);
/// benchmark.json plus per_step_rmse.csv (step, one column per series).
void emit_benchmark_report(const BenchmarkReport& report, const std::filesystem::path& out_dir);

}  // namespace ricl
