#pragma once

// Results tables (CSV or markdown) and validation-curve plots (SVG).
//
// Accuracies are printed as percentages with two decimals. Dispersion is the
// sample standard deviation of the mean accuracy across the three evaluation
// seeds of a report, also in percentage points.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "aal/error.hpp"
#include "aal/experiment.hpp"

namespace aal {

enum class ResultsFormat { csv, markdown };

inline ResultsFormat results_format_from_string(const std::string& s) {
    if (s == "csv") {
        return ResultsFormat::csv;
    }
    if (s == "markdown" || s == "md") {
        return ResultsFormat::markdown;
    }
    throw ParseError("unknown results format '" + s + "' (expected csv or markdown)");
}

inline constexpr const char* results_columns = "policy,learner,dataset,N,K,split,mean_acc,dispersion,episodes,seed";

inline std::string percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
    return buf;
}

inline std::string format_results(const std::vector<EvalReport>& reports, ResultsFormat format,
                                  const std::vector<GridRow>& failures = {}) {
    require(!reports.empty() || !failures.empty(), "emit_results: no reports");
    std::ostringstream os;
    if (format == ResultsFormat::csv) {
        os << results_columns << "\n";
        for (const auto& r : reports) {
            os << r.policy << "," << r.learner << "," << r.dataset << "," << r.n_way << "," << r.k_shot << ","
               << r.split << "," << percent(r.mean_acc) << "," << percent(r.dispersion) << "," << r.episodes << ","
               << r.seed << "\n";
        }
        return os.str();
    }
    os << "Accuracy is the mean over " << evaluation_seeds
       << " evaluation seeds; the +/- value is the sample standard deviation of the per-seed means.\n\n";
    os << "| Policy | Learner | Dataset | Setting | Split | Accuracy | Episodes | Seed |\n";
    os << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : reports) {
        os << "| " << r.policy << " | " << r.learner << " | " << r.dataset << " | " << r.n_way << "-way " << r.k_shot
           << "-shot | " << r.split << " | " << percent(r.mean_acc) << "±" << percent(r.dispersion) << "% | "
           << r.episodes << " | " << r.seed << " |\n";
    }
    if (!failures.empty()) {
        os << "\nFailed runs:\n\n";
        for (const auto& f : failures) {
            os << "- " << f.policy << ": " << f.error << "\n";
        }
    }
    return os.str();
}

inline void emit_results(const std::vector<EvalReport>& reports, ResultsFormat format,
                         const std::filesystem::path& path, const std::vector<GridRow>& failures = {}) {
    const auto text = format_results(reports, format, failures);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    out << text;
    out.flush();
    if (!out) {
        throw Error("cannot write results to " + path.string());
    }
}

/// Reads a CSV written by emit_results. Percent columns come back as
/// fractions; per-seed means and epoch are not stored and stay empty / 0.
inline std::vector<EvalReport> parse_results_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != results_columns) {
        throw ParseError("results CSV: unexpected header");
    }
    std::vector<EvalReport> out;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            f.push_back(cell);
        }
        if (f.size() != 10) {
            throw ParseError("results CSV row " + std::to_string(row) + ": expected 10 fields");
        }
        try {
            EvalReport r;
            r.policy = f[0];
            r.learner = f[1];
            r.dataset = f[2];
            r.n_way = std::stoi(f[3]);
            r.k_shot = std::stoi(f[4]);
            r.split = f[5];
            r.mean_acc = std::stod(f[6]) / 100.0;
            r.dispersion = std::stod(f[7]) / 100.0;
            r.episodes = std::stoi(f[8]);
            r.seed = std::stoull(f[9]);
            out.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw ParseError("results CSV row " + std::to_string(row) + ": malformed number");
        }
    }
    return out;
}

inline std::vector<EvalReport> read_results_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw LoadError("cannot read results file " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_results_csv(ss.str());
}

/// SVG line chart of validation accuracy against epoch, one curve per record,
/// legend labels taken from the record labels.
inline std::string render_validation_svg(const std::vector<TrainingRecord>& records) {
    require(!records.empty(), "emit_plots: empty training record");
    int max_epoch = 0;
    for (const auto& r : records) {
        require(!r.epochs.empty(), "emit_plots: run '" + r.label + "' has no epochs");
        max_epoch = std::max(max_epoch, r.epochs.back().epoch);
    }
    const double w = 640;
    const double h = 400;
    const double left = 60;
    const double right = 160;
    const double top = 20;
    const double bottom = 50;
    const double pw = w - left - right;
    const double ph = h - top - bottom;
    auto px = [&](int epoch) { return left + (max_epoch <= 1 ? pw / 2 : pw * (epoch - 1) / (max_epoch - 1)); };
    auto py = [&](double acc) { return top + ph * (1.0 - acc); };
    static constexpr const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                              "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double acc = i / 5.0;
        os << "<line x1=\"" << left << "\" y1=\"" << py(acc) << "\" x2=\"" << left + pw << "\" y2=\"" << py(acc)
           << "\" stroke=\"#ddd\"/>\n";
        os << "<text x=\"" << left - 8 << "\" y=\"" << py(acc) + 4 << "\" text-anchor=\"end\">" << i * 20
           << "%</text>\n";
    }
    os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
       << "\" stroke=\"black\"/>\n";
    const int ticks = std::min(max_epoch, 10);
    for (int i = 0; i < ticks; ++i) {
        const int e = max_epoch <= 1 ? 1 : 1 + (max_epoch - 1) * i / std::max(ticks - 1, 1);
        os << "<text x=\"" << px(e) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << e << "</text>\n";
    }
    os << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">epoch</text>\n";
    os << "<text transform=\"translate(15," << top + ph / 2
       << ") rotate(-90)\" text-anchor=\"middle\">validation accuracy</text>\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        const char* colour = colours[i % std::size(colours)];
        const auto& r = records[i];
        os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
        for (const auto& e : r.epochs) {
            os << px(e.epoch) << "," << py(e.val_acc) << " ";
        }
        os << "\"/>\n";
        for (const auto& e : r.epochs) {
            os << "<circle cx=\"" << px(e.epoch) << "\" cy=\"" << py(e.val_acc) << "\" r=\"3\" fill=\"" << colour
               << "\"/>\n";
        }
        const double ly = top + 14 + 18.0 * static_cast<double>(i);
        os << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 32 << "\" y2=\""
           << ly - 4 << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly << "\">" << r.label << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

/// Writes `dir/validation_curves.svg` and returns its path.
inline std::filesystem::path emit_plots(const std::vector<TrainingRecord>& records, const std::filesystem::path& dir) {
    const auto svg = render_validation_svg(records);
    std::filesystem::create_directories(dir);
    const auto path = dir / "validation_curves.svg";
    std::ofstream out(path);
    out << svg;
    out.flush();
    if (!out) {
        throw Error("cannot write plot " + path.string());
    }
    return path;
}

}  // namespace aal
