// SPDX-License-Identifier: Apache-2.0

#include "ricl/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ricl/risk.hpp"

namespace ricl {
namespace {

double sorted_mean(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open for writing: " + path.string());
    }
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) {
        throw IoError("failed writing: " + path.string());
    }
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) {
        throw IoError("cannot create output directory: " + dir.string());
    }
}

std::string histogram_svg(const Histogram& h) {
    constexpr double kWidth = 640.0;
    constexpr double kHeight = 360.0;
    constexpr double kMargin = 40.0;
    const std::int64_t peak = h.counts.empty() ? 0 : *std::max_element(h.counts.begin(), h.counts.end());
    const double plot_w = kWidth - 2 * kMargin;
    const double plot_h = kHeight - 2 * kMargin;
    const double bar_w = h.counts.empty() ? 0.0 : plot_w / static_cast<double>(h.counts.size());
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<line x1=\"" << kMargin << "\" y1=\"" << kHeight - kMargin << "\" x2=\"" << kWidth - kMargin
      << "\" y2=\"" << kHeight - kMargin << "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        const double bh = peak > 0 ? plot_h * static_cast<double>(h.counts[i]) / static_cast<double>(peak) : 0.0;
        s << "<rect x=\"" << format_real(kMargin + bar_w * static_cast<double>(i)) << "\" y=\""
          << format_real(kHeight - kMargin - bh) << "\" width=\"" << format_real(bar_w) << "\" height=\""
          << format_real(bh) << "\" fill=\"steelblue\"/>\n";
    }
    s << "<text x=\"" << kMargin << "\" y=\"" << kHeight - 12 << "\" font-size=\"12\">0</text>\n";
    s << "<text x=\"" << kWidth - kMargin << "\" y=\"" << kHeight - 12
      << "\" font-size=\"12\" text-anchor=\"end\">" << format_real(h.bin_edges.back()) << "</text>\n";
    s << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 12
      << "\" font-size=\"12\" text-anchor=\"middle\">RMSE</text>\n";
    s << "<text x=\"" << kMargin << "\" y=\"" << kMargin - 10 << "\" font-size=\"12\">max count " << peak
      << "</text>\n";
    s << "</svg>\n";
    return s.str();
}

std::vector<std::string> split(const std::string& line, char delimiter) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == delimiter) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::optional<double> parse_real(const std::string& field) {
    const std::string t = trim(field);
    if (t.empty()) {
        return std::nullopt;
    }
    const char* first = t.data();
    if (*first == '+') {
        ++first;
    }
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), v);
    if (ec != std::errc{} || ptr != t.data() + t.size() || !std::isfinite(v)) {
        return std::nullopt;
    }
    return v;
}

}  // namespace

Histogram make_histogram(std::span<const double> values, const HistogramSpec& spec) {
    if (spec.bins < 1) {
        throw ArgumentError("histogram needs at least one bin");
    }
    double upper = 0.0;
    if (spec.upper) {
        upper = *spec.upper;
    } else {
        for (double v : values) {
            upper = std::max(upper, v);
        }
    }
    if (!(upper > 0.0) || !std::isfinite(upper)) {
        upper = 1.0;
    }
    Histogram h;
    h.bin_edges.resize(static_cast<std::size_t>(spec.bins) + 1);
    for (int i = 0; i <= spec.bins; ++i) {
        h.bin_edges[static_cast<std::size_t>(i)] = upper * static_cast<double>(i) / spec.bins;
    }
    h.counts.assign(static_cast<std::size_t>(spec.bins), 0);
    for (double v : values) {
        auto bin = static_cast<std::int64_t>(std::floor(v / upper * spec.bins));
        bin = std::clamp<std::int64_t>(bin, 0, spec.bins - 1);
        ++h.counts[static_cast<std::size_t>(bin)];
    }
    return h;
}

std::size_t eval_tail_count(double tail_fraction, std::size_t n) {
    if (!(tail_fraction > 0.0 && tail_fraction <= 1.0)) {
        throw ArgumentError("tail fraction must lie in (0, 1]");
    }
    const auto k = static_cast<std::size_t>(std::ceil(tail_fraction * static_cast<double>(n) - 1e-9));
    return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(n, 1));
}

EvalReport summarize_rmse(std::span<const double> rmses, double tail_fraction, const HistogramSpec& hist) {
    if (rmses.empty()) {
        throw ArgumentError("evaluation needs at least one task");
    }
    EvalReport r;
    r.n_tasks = static_cast<std::int64_t>(rmses.size());
    r.tail_fraction_used = tail_fraction;
    std::vector<double> values(rmses.begin(), rmses.end());
    r.per_task.reserve(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        r.per_task.push_back({static_cast<std::int64_t>(i), values[i]});
    }
    r.mean_rmse = sorted_mean(values);

    const std::size_t k = eval_tail_count(tail_fraction, values.size());
    r.tail_count = static_cast<std::int64_t>(k);
    const auto top = select_top(RiskVector::from_values(values), k);
    std::vector<double> tail;
    tail.reserve(k);
    for (std::size_t i : top) {
        tail.push_back(values[i]);
    }
    r.tail_mean_rmse = sorted_mean(tail);

    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    r.median_rmse = sorted[(sorted.size() - 1) / 2];
    r.histogram = make_histogram(values, hist);
    return r;
}

std::vector<double> task_rmses(const Predictor& model, std::span<const TaskDataset> tasks, int threads) {
    std::vector<double> out(tasks.size());
    parallel_for(tasks.size(), threads, [&](std::size_t i) {
        const auto pred = model.predict(tasks[i]);
        out[i] = rmse(tasks[i].target(), pred.mu);
    });
    return out;
}

EvalReport evaluate_batch(const Predictor& model, std::span<const TaskDataset> tasks, double tail_fraction,
                          const HistogramSpec& hist, int threads) {
    if (tasks.empty()) {
        throw ArgumentError("evaluate_batch: empty task list");
    }
    return summarize_rmse(task_rmses(model, tasks, threads), tail_fraction, hist);
}

std::size_t chunk_count(std::size_t len, int c, int chunk) {
    if (chunk < 1 || c < 0 || len <= static_cast<std::size_t>(c)) {
        return 0;
    }
    const std::size_t span = len - static_cast<std::size_t>(c);
    return (span + static_cast<std::size_t>(chunk) - 1) / static_cast<std::size_t>(chunk);
}

std::vector<double> iterative_inference(const Predictor& model, std::span<const double> context_u,
                                        std::span<const double> context_y, std::span<const double> long_u,
                                        std::span<const double> y_init, int chunk) {
    const std::size_t c = y_init.size();
    if (chunk < 1) {
        throw ArgumentError("iterative_inference: chunk must be positive");
    }
    if (context_u.size() != context_y.size()) {
        throw ArgumentError("iterative_inference: context u and y differ in length");
    }
    if (long_u.size() < c + static_cast<std::size_t>(chunk)) {
        throw ArgumentError("iterative_inference: input of length " + std::to_string(long_u.size()) +
                            " is shorter than c + chunk = " + std::to_string(c + static_cast<std::size_t>(chunk)));
    }
    // y_hist holds the initial outputs followed by the predictions so far, aligned with long_u.
    std::vector<double> y_hist(y_init.begin(), y_init.end());
    y_hist.reserve(long_u.size());

    TaskDataset q;
    q.context_u.assign(context_u.begin(), context_u.end());
    q.context_y.assign(context_y.begin(), context_y.end());
    q.init_len = static_cast<int>(c);
    for (std::size_t start = c; start < long_u.size(); start += static_cast<std::size_t>(chunk)) {
        const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(chunk), long_u.size() - start);
        q.query_u.assign(long_u.begin() + static_cast<std::ptrdiff_t>(start - c),
                         long_u.begin() + static_cast<std::ptrdiff_t>(start + len));
        q.query_y.assign(c + len, 0.0);
        std::copy(y_hist.end() - static_cast<std::ptrdiff_t>(c), y_hist.end(), q.query_y.begin());
        const auto pred = model.predict(q);
        if (pred.mu.size() != len) {
            throw ArgumentError("iterative_inference: predictor returned " + std::to_string(pred.mu.size()) +
                                " values for a chunk of " + std::to_string(len));
        }
        y_hist.insert(y_hist.end(), pred.mu.begin(), pred.mu.end());
    }
    return std::vector<double>(y_hist.begin() + static_cast<std::ptrdiff_t>(c), y_hist.end());
}

void BenchmarkSeries::validate() const {
    if (u.size() != y.size()) {
        throw ArgumentError("series '" + name + "': u and y differ in length");
    }
    for (std::size_t i = 0; i < u.size(); ++i) {
        if (!std::isfinite(u[i]) || !std::isfinite(y[i])) {
            throw ArgumentError("series '" + name + "': non-finite value at sample " + std::to_string(i));
        }
    }
}

std::size_t context_count(std::size_t train_len, int context_len) {
    if (context_len < 1) {
        throw ArgumentError("context length must be positive");
    }
    return train_len / static_cast<std::size_t>(context_len);
}

BenchmarkReport run_benchmark(const Predictor& model, const BenchmarkSeries& train,
                              std::span<const BenchmarkSeries> tests, const BenchmarkOptions& options,
                              int threads) {
    train.validate();
    for (const auto& t : tests) {
        t.validate();
    }
    if (options.init_len < 0 || options.chunk < 1) {
        throw ArgumentError("benchmark: c must be >= 0 and chunk >= 1");
    }
    const std::size_t n_ctx = context_count(train.sample_count(), options.context_len);
    if (n_ctx == 0) {
        throw ArgumentError("benchmark: training series of length " + std::to_string(train.sample_count()) +
                            " is shorter than m = " + std::to_string(options.context_len));
    }
    double u_mean = 0.0, u_std = 1.0, y_mean = 0.0, y_std = 1.0;
    if (options.standardize) {
        const auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
            mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            double ss = 0.0;
            for (double x : v) {
                ss += (x - mean) * (x - mean);
            }
            sd = std::sqrt(ss / static_cast<double>(v.size()));
            if (!(sd > 0.0)) {
                sd = 1.0;
            }
        };
        stats(train.u, u_mean, u_std);
        stats(train.y, y_mean, y_std);
    }
    const auto scale = [](std::span<const double> v, double mean, double sd) {
        std::vector<double> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            out[i] = (v[i] - mean) / sd;
        }
        return out;
    };

    const auto m = static_cast<std::size_t>(options.context_len);
    const auto c = static_cast<std::size_t>(options.init_len);
    std::vector<std::vector<double>> ctx_u(n_ctx), ctx_y(n_ctx);
    for (std::size_t k = 0; k < n_ctx; ++k) {
        ctx_u[k] = scale(std::span<const double>(train.u).subspan(k * m, m), u_mean, u_std);
        ctx_y[k] = scale(std::span<const double>(train.y).subspan(k * m, m), y_mean, y_std);
    }

    BenchmarkReport report;
    report.n_contexts = n_ctx;
    report.options = options;
    for (const auto& test : tests) {
        if (test.sample_count() < c + static_cast<std::size_t>(options.chunk)) {
            throw ArgumentError("benchmark: test series '" + test.name + "' is shorter than c + chunk");
        }
        const auto su = scale(test.u, u_mean, u_std);
        const auto sy = scale(std::span<const double>(test.y).first(c), y_mean, y_std);
        const std::size_t horizon = test.sample_count() - c;
        std::vector<std::vector<double>> sq(n_ctx, std::vector<double>(horizon));
        parallel_for(n_ctx, threads, [&](std::size_t k) {
            const auto pred = iterative_inference(model, ctx_u[k], ctx_y[k], su, sy, options.chunk);
            for (std::size_t i = 0; i < horizon; ++i) {
                const double e = test.y[c + i] - (pred[i] * y_std + y_mean);
                sq[k][i] = e * e;
            }
        });
        SeriesResult r;
        r.name = test.name;
        r.n_chunks = chunk_count(test.sample_count(), options.init_len, options.chunk);
        r.per_context_rmse.resize(n_ctx);
        r.per_step_rmse.assign(horizon, 0.0);
        double total = 0.0;
        for (std::size_t k = 0; k < n_ctx; ++k) {
            double ss = 0.0;
            for (std::size_t i = 0; i < horizon; ++i) {
                ss += sq[k][i];
                r.per_step_rmse[i] += sq[k][i];
            }
            r.per_context_rmse[k] = std::sqrt(ss / static_cast<double>(horizon));
            total += r.per_context_rmse[k];
        }
        for (double& v : r.per_step_rmse) {
            v = std::sqrt(v / static_cast<double>(n_ctx));
        }
        r.rmse = total / static_cast<double>(n_ctx);
        report.series.push_back(std::move(r));
    }
    return report;
}

BenchmarkSeries load_two_column_csv(const std::filesystem::path& path, const ColumnRef& u_column,
                                    const ColumnRef& y_column, char delimiter) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    BenchmarkSeries s;
    s.name = path.stem().string();
    std::string line;
    std::size_t line_no = 0;
    std::optional<std::size_t> ui, yi;
    if (const auto* idx = std::get_if<std::size_t>(&u_column)) {
        ui = *idx;
    }
    if (const auto* idx = std::get_if<std::size_t>(&y_column)) {
        yi = *idx;
    }
    bool first_row = true;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        const auto fields = split(line, delimiter);
        if (first_row) {
            first_row = false;
            const bool numeric = std::all_of(fields.begin(), fields.end(),
                                             [](const std::string& f) { return parse_real(f).has_value(); });
            if (!numeric) {
                const auto find = [&](const ColumnRef& ref, std::optional<std::size_t>& out) {
                    if (const auto* name = std::get_if<std::string>(&ref)) {
                        for (std::size_t i = 0; i < fields.size(); ++i) {
                            if (trim(fields[i]) == *name) {
                                out = i;
                            }
                        }
                        if (!out) {
                            throw SchemaError(path.string() + ": no column named '" + *name + "' in header");
                        }
                    }
                };
                find(u_column, ui);
                find(y_column, yi);
                continue;
            }
            if (!ui || !yi) {
                throw SchemaError(path.string() + ": columns selected by name but the file has no header row");
            }
        }
        if (*ui >= fields.size() || *yi >= fields.size()) {
            throw SchemaError(path.string() + ":" + std::to_string(line_no) + ": row has " +
                              std::to_string(fields.size()) + " columns, column " +
                              std::to_string(std::max(*ui, *yi)) + " requested");
        }
        const auto u = parse_real(fields[*ui]);
        const auto y = parse_real(fields[*yi]);
        if (!u || !y) {
            throw ParseError(line_no, path.string() + ":" + std::to_string(line_no) + ": malformed row '" +
                                          trim(line) + "'");
        }
        s.u.push_back(*u);
        s.y.push_back(*y);
    }
    if (s.u.empty()) {
        throw SchemaError(path.string() + ": no data rows");
    }
    return s;
}

std::string format_real(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

json to_json(const EvalReport& r) {
    return json{
        {"n_tasks", r.n_tasks},
        {"mean_rmse", r.mean_rmse},
        {"median_rmse", r.median_rmse},
        {"tail_mean_rmse", r.tail_mean_rmse},
        {"tail_fraction_used", r.tail_fraction_used},
        {"tail_count", r.tail_count},
        {"histogram", {{"bin_edges", r.histogram.bin_edges}, {"counts", r.histogram.counts}}},
    };
}

json to_json(const BenchmarkReport& r) {
    json series = json::array();
    for (const auto& s : r.series) {
        series.push_back({{"name", s.name},
                          {"rmse", s.rmse},
                          {"per_context_rmse", s.per_context_rmse},
                          {"n_chunks", s.n_chunks},
                          {"horizon", s.per_step_rmse.size()}});
    }
    return json{{"n_contexts", r.n_contexts},
                {"m", r.options.context_len},
                {"c", r.options.init_len},
                {"chunk", r.options.chunk},
                {"standardize", r.options.standardize},
                {"series", series}};
}

void emit_report(const EvalReport& report, const std::filesystem::path& out_dir) {
    ensure_dir(out_dir);
    write_text(out_dir / "report.json", to_json(report).dump(2) + "\n");

    std::string per_task = "task_id,rmse\n";
    for (const auto& t : report.per_task) {
        per_task += std::to_string(t.task_id) + "," + format_real(t.rmse) + "\n";
    }
    write_text(out_dir / "per_task.csv", per_task);

    std::string hist = "lower_edge,upper_edge,count\n";
    const auto& h = report.histogram;
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        hist += format_real(h.bin_edges[i]) + "," + format_real(h.bin_edges[i + 1]) + "," +
                std::to_string(h.counts[i]) + "\n";
    }
    write_text(out_dir / "histogram.csv", hist);
    write_text(out_dir / "histogram.svg", histogram_svg(h));
}

void emit_benchmark_report(const BenchmarkReport& report, const std::filesystem::path& out_dir) {
    ensure_dir(out_dir);
    write_text(out_dir / "benchmark.json", to_json(report).dump(2) + "\n");
    std::string csv = "step";
    std::size_t rows = 0;
    for (const auto& s : report.series) {
        csv += "," + s.name;
        rows = std::max(rows, s.per_step_rmse.size());
    }
    csv += "\n";
    for (std::size_t i = 0; i < rows; ++i) {
        csv += std::to_string(i + static_cast<std::size_t>(report.options.init_len));
        for (const auto& s : report.series) {
            csv += ",";
            if (i < s.per_step_rmse.size()) {
                csv += format_real(s.per_step_rmse[i]);
            }
        }
        csv += "\n";
    }
    write_text(out_dir / "per_step_rmse.csv", csv);
}

}  // namespace ricl
