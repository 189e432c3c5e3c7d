#pragma once

// Tiled inference, hard Dice, paired significance testing and the report
// files produced by evaluation runs.

#include <filesystem>
#include <string>
#include <vector>

#include "mtseg/backbone.hpp"
#include "mtseg/domain.hpp"
#include "mtseg/synthdata.hpp"

namespace mtseg {

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

// Reads MTSEG_THREADS; defaults to 1.
int inference_threads_from_env();

// Output windows tile the volume in x-major order starting at the origin;
// the last window on each axis is shifted back to end at the border and
// overlapping voxels keep the later tile's prediction. Voxels outside the
// mask are background.
LabelMap segment_volume(const Backbone& net, const ModelWeights& w, const Volume& v,
                        LoResMode mode = LoResMode::mean_pool, int threads = 1);

// ---------------------------------------------------------------------------
// Metrics and statistics
// ---------------------------------------------------------------------------

// 2|P ∩ R| / (|P| + |R|) over voxels equal to `label`; 1.0 when the label is
// absent from both maps.
double dice_coefficient(const LabelMap& pred, const LabelMap& ref, int label);

bool label_absent(const LabelMap& pred, const LabelMap& ref, int label);

// Regularised incomplete beta I_x(a, b).
double regularized_incomplete_beta(double a, double b, double x);

// P(T <= t) for Student's t with `dof` degrees of freedom.
double student_t_cdf(double t, double dof);

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    int dof = 0;
};

// Two-sided paired t-test on d = a - b. All-zero differences give t = 0,
// p = 1; constant nonzero differences give t = +-inf, p = 0.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // n - 1 denominator; 0 when n == 1
    bool std_defined = false;
};

MeanStd mean_std(const std::vector<double>& xs);

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

struct ScanResult {
    std::string scan_id;
    double dice = 0.0;
    bool flagged_empty = false;  // lesion absent from both maps
    LabelMap predicted;
    LabelMap reference;
};

struct EvaluationSummary {
    std::string method;
    std::vector<ScanResult> scans;
    MeanStd dice;

    [[nodiscard]] std::vector<double> dice_values() const;
};

EvaluationSummary evaluate_model(const Backbone& net, const ModelWeights& w,
                                 const std::vector<AnnotatedSample>& test_set, const std::string& method,
                                 LoResMode mode = LoResMode::mean_pool, int threads = 1);

// Per-scan CSV: scan_id,dice,flagged_empty
void write_scan_results_csv(const std::filesystem::path& path, const EvaluationSummary& s);
// Rebuilds the summary (without label maps) from a per-scan CSV.
EvaluationSummary read_scan_results_csv(const std::filesystem::path& path, const std::string& method);
// Summary CSV: method,n,mean,std
void write_summary_csv(const std::filesystem::path& path, const std::vector<EvaluationSummary>& rows);

struct PairwiseComparison {
    std::string method_a;
    std::string method_b;
    TTestResult test;
    bool significant = false;  // p < 0.05
};

struct ComparisonReport {
    std::vector<EvaluationSummary> methods;
    std::vector<PairwiseComparison> pairs;  // every unordered pair, input order

    // Mean ± std per method; methods that differ significantly from the
    // first one (the reference) carry an asterisk.
    [[nodiscard]] std::string render_table() const;
};

inline constexpr double kSignificanceLevel = 0.05;

// Pairs scans by id; throws PairingError when the scan sets differ.
ComparisonReport compare_runs(const std::vector<EvaluationSummary>& summaries);

// Comparison CSV: method_a,method_b,t,p,significant
void write_comparison_csv(const std::filesystem::path& path, const ComparisonReport& r);

std::string format_mean_std(const MeanStd& m);

// ---------------------------------------------------------------------------
// Training metrics stream
// ---------------------------------------------------------------------------

struct MetricsRow {
    std::int64_t step = 0;
    double ls = 0.0;
    double lc = 0.0;
    double beta = 0.0;
    double alpha = 0.0;
    double student_train_dice = 0.0;
    double teacher_train_dice = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,L_s,L_c,beta,alpha,student_train_dice,teacher_train_dice";

// Appends rows, writing the header first when the file is new or empty.
void append_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct CurvePlot {
    std::filesystem::path svg;
    std::filesystem::path csv;
};

// Student and teacher training Dice against step, with a marker at the end
// of the ramp-up. Writes an SVG plot and the plotted series as CSV.
CurvePlot plot_training_curves(const std::filesystem::path& metrics_csv,
                               const std::filesystem::path& out_prefix, std::int64_t ramp_length);

}  // namespace mtseg
