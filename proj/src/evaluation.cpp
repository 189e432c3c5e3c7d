#include "mtseg/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

namespace mtseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

int inference_threads_from_env() {
    const char* env = std::getenv("MTSEG_THREADS");
    if (!env || !*env) return 1;
    try {
        return std::max(1, std::stoi(env));
    } catch (const std::exception&) {
        throw ConfigError(std::string("MTSEG_THREADS must be an integer, got '") + env + "'");
    }
}

namespace {

std::vector<int> tile_starts(int extent, int window) {
    std::vector<int> starts;
    if (extent <= window) return {0};
    for (int s = 0; s + window < extent; s += window) starts.push_back(s);
    starts.push_back(extent - window);
    return starts;
}

template <typename F>
void parallel_for(std::size_t n, int threads, F&& body) {
    const int workers = static_cast<int>(std::min<std::size_t>(std::max(threads, 1), n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = next++; i < n; i = next++) body(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace

LabelMap segment_volume(const Backbone& net, const ModelWeights& w, const Volume& v, LoResMode mode,
                        int threads) {
    v.validate();
    const PatchGeometry g = patch_geometry(net.config(), mode);
    const Shape3 s = v.shape();
    const auto xs = tile_starts(s.x, g.output.x);
    const auto ys = tile_starts(s.y, g.output.y);
    const auto zs = tile_starts(s.z, g.output.z);
    std::vector<Index3> origins;
    for (int x : xs) {
        for (int y : ys) {
            for (int z : zs) origins.push_back({x, y, z});
        }
    }

    std::vector<LabelMap> tiles(origins.size());
    parallel_for(origins.size(), threads, [&](std::size_t i) {
        const PatchPair p = extract_patch_pair(v, nullptr, center_for_output_origin(origins[i], g), g);
        tiles[i] = argmax(net.forward(w, p));
    });

    LabelMap out(s, net.config().num_classes);
    for (std::size_t i = 0; i < origins.size(); ++i) {
        const Index3 o = origins[i];
        const LabelMap& t = tiles[i];
        for (int x = 0; x < g.output.x; ++x) {
            for (int y = 0; y < g.output.y; ++y) {
                for (int z = 0; z < g.output.z; ++z) {
                    if (out.labels.contains(o.x + x, o.y + y, o.z + z)) {
                        out.labels(o.x + x, o.y + y, o.z + z) = t.labels(x, y, z);
                    }
                }
            }
        }
    }
    if (v.mask) {
        auto labels = out.labels.values();
        const auto mask = v.mask->values();
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (!mask[i]) labels[i] = 0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics and statistics
// ---------------------------------------------------------------------------

namespace {

void require_same_labels_shape(const LabelMap& a, const LabelMap& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("label maps differ in shape: " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
}

}  // namespace

double dice_coefficient(const LabelMap& pred, const LabelMap& ref, int label) {
    require_same_labels_shape(pred, ref);
    const auto p = pred.labels.values();
    const auto r = ref.labels.values();
    std::size_t np = 0, nr = 0, both = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool in_p = p[i] == label;
        const bool in_r = r[i] == label;
        np += in_p;
        nr += in_r;
        both += in_p && in_r;
    }
    if (np + nr == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(np + nr);
}

bool label_absent(const LabelMap& pred, const LabelMap& ref, int label) {
    require_same_labels_shape(pred, ref);
    auto has = [label](const LabelMap& m) {
        const auto v = m.labels.values();
        return std::find(v.begin(), v.end(), label) != v.end();
    };
    return !has(pred) && !has(ref);
}

namespace {

// Continued fraction for I_x(a, b) (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 10000;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw PreconditionError("incomplete beta needs a, b > 0");
    if (x < 0.0 || x > 1.0) throw PreconditionError("incomplete beta needs x in [0, 1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                             b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof) {
    if (!(dof > 0.0)) throw PreconditionError("degrees of freedom must be positive");
    if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
    const double x = dof / (dof + t * t);
    const double tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, x);
    return t > 0 ? 1.0 - tail : tail;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw PairingError("paired samples differ in length");
    const std::size_t n = a.size();
    if (n < 2) throw SampleSizeError("paired t-test needs at least two pairs");
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    const MeanStd ms = mean_std(d);
    TTestResult r;
    r.dof = static_cast<int>(n - 1);
    if (ms.std == 0.0) {
        if (ms.mean == 0.0) {
            r.t = 0.0;
            r.p = 1.0;
        } else {
            r.t = ms.mean > 0 ? std::numeric_limits<double>::infinity()
                              : -std::numeric_limits<double>::infinity();
            r.p = 0.0;
        }
        return r;
    }
    r.t = ms.mean / (ms.std / std::sqrt(static_cast<double>(n)));
    const double x = r.dof / (r.dof + r.t * r.t);
    r.p = regularized_incomplete_beta(r.dof / 2.0, 0.5, x);
    return r;
}

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd m;
    if (xs.empty()) return m;
    double sum = 0.0;
    for (double x : xs) sum += x;
    m.mean = sum / static_cast<double>(xs.size());
    if (xs.size() < 2) return m;
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    m.std_defined = true;
    return m;
}

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

std::vector<double> EvaluationSummary::dice_values() const {
    std::vector<double> out;
    out.reserve(scans.size());
    for (const auto& s : scans) out.push_back(s.dice);
    return out;
}

EvaluationSummary evaluate_model(const Backbone& net, const ModelWeights& w,
                                 const std::vector<AnnotatedSample>& test_set, const std::string& method,
                                 LoResMode mode, int threads) {
    if (test_set.empty()) throw PreconditionError("evaluation needs at least one test scan");
    EvaluationSummary s;
    s.method = method;
    constexpr int kLesion = 1;
    for (const auto& sample : test_set) {
        ScanResult r;
        r.scan_id = sample.id;
        r.predicted = segment_volume(net, w, sample.volume, mode, threads);
        r.reference = sample.annotation;
        r.dice = dice_coefficient(r.predicted, r.reference, kLesion);
        r.flagged_empty = label_absent(r.predicted, r.reference, kLesion);
        s.scans.push_back(std::move(r));
    }
    s.dice = mean_std(s.dice_values());
    return s;
}

namespace {

std::string format_double(double v) {
    std::ostringstream ss;
    ss << std::setprecision(17) << v;
    return ss.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
        throw FormatError(what + ": cannot parse number '" + s + "'");
    }
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::string& header) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != header) {
        throw FormatError(path.string() + ": expected header '" + header + "'");
    }
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        rows.push_back(split_csv_line(line));
    }
    return rows;
}

}  // namespace

void write_scan_results_csv(const fs::path& path, const EvaluationSummary& s) {
    std::ostringstream out;
    out << "scan_id,dice,flagged_empty\n";
    for (const auto& r : s.scans) {
        out << r.scan_id << ',' << format_double(r.dice) << ',' << (r.flagged_empty ? 1 : 0) << '\n';
    }
    write_file_atomic(path, out.str());
}

EvaluationSummary read_scan_results_csv(const fs::path& path, const std::string& method) {
    EvaluationSummary s;
    s.method = method;
    for (const auto& row : read_csv(path, "scan_id,dice,flagged_empty")) {
        if (row.size() != 3) throw FormatError(path.string() + ": expected 3 columns");
        ScanResult r;
        r.scan_id = row[0];
        r.dice = parse_double(row[1], path.string());
        r.flagged_empty = row[2] == "1";
        s.scans.push_back(std::move(r));
    }
    s.dice = mean_std(s.dice_values());
    return s;
}

void write_summary_csv(const fs::path& path, const std::vector<EvaluationSummary>& rows) {
    std::ostringstream out;
    out << "method,n,mean,std\n";
    for (const auto& s : rows) {
        out << s.method << ',' << s.scans.size() << ',' << format_double(s.dice.mean) << ','
            << format_double(s.dice.std) << '\n';
    }
    write_file_atomic(path, out.str());
}

std::string format_mean_std(const MeanStd& m) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(4) << m.mean << " ± " << m.std;
    return ss.str();
}

ComparisonReport compare_runs(const std::vector<EvaluationSummary>& summaries) {
    ComparisonReport report;
    report.methods = summaries;
    for (std::size_t i = 0; i < summaries.size(); ++i) {
        for (std::size_t j = i + 1; j < summaries.size(); ++j) {
            const auto& a = summaries[i];
            const auto& b = summaries[j];
            std::map<std::string, double> b_by_id;
            for (const auto& s : b.scans) b_by_id[s.scan_id] = s.dice;
            if (b_by_id.size() != a.scans.size() || b.scans.size() != a.scans.size()) {
                throw PairingError("methods '" + a.method + "' and '" + b.method +
                                   "' were evaluated on different scan sets");
            }
            std::vector<double> va, vb;
            for (const auto& s : a.scans) {
                auto it = b_by_id.find(s.scan_id);
                if (it == b_by_id.end()) {
                    throw PairingError("scan '" + s.scan_id + "' missing from method '" + b.method + "'");
                }
                va.push_back(s.dice);
                vb.push_back(it->second);
            }
            PairwiseComparison pc{a.method, b.method, paired_t_test(va, vb), false};
            pc.significant = pc.test.p < kSignificanceLevel;
            report.pairs.push_back(pc);
        }
    }
    return report;
}

std::string ComparisonReport::render_table() const {
    std::size_t width = 6;
    for (const auto& m : methods) width = std::max(width, m.method.size());
    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(width)) << "Method"
        << "  Dice (mean ± std)   n\n";
    for (const auto& m : methods) {
        bool marked = false;
        for (const auto& p : pairs) {
            if (p.method_a == methods.front().method && p.method_b == m.method) marked = p.significant;
        }
        out << std::left << std::setw(static_cast<int>(width)) << m.method << "  "
            << format_mean_std(m.dice) << (marked ? "*" : " ") << "   " << m.scans.size() << '\n';
    }
    if (!pairs.empty()) {
        out << "\n* differs from " << methods.front().method << " (paired t-test, p < " << kSignificanceLevel
            << ")\n";
        for (const auto& p : pairs) {
            out << "  " << p.method_a << " vs " << p.method_b << ": t = " << std::setprecision(4)
                << p.test.t << ", p = " << p.test.p << (p.significant ? " *" : "") << '\n';
        }
    }
    return out.str();
}

void write_comparison_csv(const fs::path& path, const ComparisonReport& r) {
    std::ostringstream out;
    out << "method_a,method_b,t,p,significant\n";
    for (const auto& p : r.pairs) {
        out << p.method_a << ',' << p.method_b << ',' << format_double(p.test.t) << ','
            << format_double(p.test.p) << ',' << (p.significant ? 1 : 0) << '\n';
    }
    write_file_atomic(path, out.str());
}

// ---------------------------------------------------------------------------
// Training metrics stream
// ---------------------------------------------------------------------------

void append_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows) {
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    std::ofstream out(path, std::ios::app);
    if (!out) throw Error("cannot append to " + path.string());
    if (fresh) out << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        out << r.step << ',' << format_double(r.ls) << ',' << format_double(r.lc) << ','
            << format_double(r.beta) << ',' << format_double(r.alpha) << ','
            << format_double(r.student_train_dice) << ',' << format_double(r.teacher_train_dice) << '\n';
    }
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
    std::vector<MetricsRow> rows;
    for (const auto& cells : read_csv(path, kMetricsHeader)) {
        if (cells.size() != 7) throw FormatError(path.string() + ": expected 7 columns");
        MetricsRow r;
        r.step = static_cast<std::int64_t>(parse_double(cells[0], path.string()));
        r.ls = parse_double(cells[1], path.string());
        r.lc = parse_double(cells[2], path.string());
        r.beta = parse_double(cells[3], path.string());
        r.alpha = parse_double(cells[4], path.string());
        r.student_train_dice = parse_double(cells[5], path.string());
        r.teacher_train_dice = parse_double(cells[6], path.string());
        rows.push_back(r);
    }
    return rows;
}

CurvePlot plot_training_curves(const fs::path& metrics_csv, const fs::path& out_prefix,
                               std::int64_t ramp_length) {
    std::vector<MetricsRow> rows;
    for (const auto& r : read_metrics_csv(metrics_csv)) {
        if (std::isfinite(r.student_train_dice) && std::isfinite(r.teacher_train_dice)) rows.push_back(r);
    }
    if (rows.empty()) throw FormatError(metrics_csv.string() + ": no monitored steps in metrics stream");

    CurvePlot plot{out_prefix.string() + ".svg", out_prefix.string() + ".csv"};
    std::ostringstream csv;
    csv << "step,student_train_dice,teacher_train_dice\n";
    for (const auto& r : rows) {
        csv << r.step << ',' << format_double(r.student_train_dice) << ','
            << format_double(r.teacher_train_dice) << '\n';
    }
    write_file_atomic(plot.csv, csv.str());

    constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 20, kTop = 30, kBottom = 50;
    const double max_step = std::max<double>({1.0, static_cast<double>(rows.back().step),
                                              static_cast<double>(ramp_length)});
    auto px = [&](double step) { return kLeft + (kW - kLeft - kRight) * step / max_step; };
    auto py = [&](double dice) {
        const double d = std::isfinite(dice) ? std::clamp(dice, 0.0, 1.0) : 0.0;
        return kH - kBottom - (kH - kTop - kBottom) * d;
    };
    auto polyline = [&](auto member, const char* colour, const char* id) {
        std::ostringstream s;
        s << "  <polyline id=\"" << id << "\" fill=\"none\" stroke=\"" << colour
          << "\" stroke-width=\"2\" points=\"";
        for (const auto& r : rows) s << px(static_cast<double>(r.step)) << ',' << py(r.*member) << ' ';
        s << "\"/>\n";
        for (const auto& r : rows) {
            s << "  <circle cx=\"" << px(static_cast<double>(r.step)) << "\" cy=\"" << py(r.*member)
              << "\" r=\"2\" fill=\"" << colour << "\"/>\n";
        }
        return s.str();
    };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
    svg << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "  <line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight
        << "\" y2=\"" << kH - kBottom << "\" stroke=\"black\"/>\n";
    svg << "  <line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
        << kH - kBottom << "\" stroke=\"black\"/>\n";
    for (int tick = 0; tick <= 4; ++tick) {
        const double d = tick / 4.0;
        svg << "  <text x=\"" << kLeft - 8 << "\" y=\"" << py(d) + 4
            << "\" font-size=\"11\" text-anchor=\"end\">" << d << "</text>\n";
    }
    svg << "  <text x=\"" << (kW + kLeft) / 2 << "\" y=\"" << kH - 12
        << "\" font-size=\"12\" text-anchor=\"middle\">step (max " << max_step << ")</text>\n";
    svg << "  <text x=\"16\" y=\"" << kH / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 "
        << kH / 2 << ")\" text-anchor=\"middle\">training Dice</text>\n";
    svg << "  <line id=\"rampup-end\" x1=\"" << px(static_cast<double>(ramp_length)) << "\" y1=\""
        << kTop << "\" x2=\"" << px(static_cast<double>(ramp_length)) << "\" y2=\"" << kH - kBottom
        << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
    svg << "  <text x=\"" << px(static_cast<double>(ramp_length)) + 4 << "\" y=\"" << kTop + 12
        << "\" font-size=\"11\" fill=\"gray\">ramp-up end (L=" << ramp_length << ")</text>\n";
    svg << polyline(&MetricsRow::student_train_dice, "#d62728", "student");
    svg << polyline(&MetricsRow::teacher_train_dice, "#1f77b4", "teacher");
    svg << "  <text x=\"" << kW - 120 << "\" y=\"" << kTop + 12
        << "\" font-size=\"12\" fill=\"#1f77b4\">teacher</text>\n";
    svg << "  <text x=\"" << kW - 120 << "\" y=\"" << kTop + 28
        << "\" font-size=\"12\" fill=\"#d62728\">student</text>\n";
    svg << "</svg>\n";
    write_file_atomic(plot.svg, svg.str());
    return plot;
}

}  // namespace mtseg
