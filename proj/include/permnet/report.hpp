#pragma once

// Diagnostics and reporting: plotter-neutral CSV grid dumps (index embedding,
// M_dp), the diagonal-dominance statistic, results tables grouped by
// (problem, dataset length), and the switch-corpus error-locus report.

#include "permnet/harness.hpp"

#include <json.hpp>

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace permnet {

// ---- numeric grids ----------------------------------------------------------

/// A labeled numeric grid. Serialized form: first line `corner,col...`, then
/// one line per row, `label,value...`. Values print as shortest-exact doubles
/// so parse -> dump round-trips byte-identically.
struct Grid {
    std::string corner;
    std::vector<std::string> col_labels;
    std::vector<std::string> row_labels;
    Eigen::MatrixXd values;
};

inline std::string format_grid_value(double v) {
    char buf[40];
    // Shortest representation that parses back to the same double.
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    return buf;
}

inline std::string grid_to_csv(const Grid& g) {
    if (g.values.rows() != static_cast<Eigen::Index>(g.row_labels.size()) ||
        g.values.cols() != static_cast<Eigen::Index>(g.col_labels.size()))
        throw std::invalid_argument("grid labels do not match value shape");
    std::ostringstream os;
    os << g.corner;
    for (const auto& c : g.col_labels) os << ',' << c;
    os << '\n';
    for (Eigen::Index r = 0; r < g.values.rows(); ++r) {
        os << g.row_labels[static_cast<std::size_t>(r)];
        for (Eigen::Index c = 0; c < g.values.cols(); ++c)
            os << ',' << format_grid_value(g.values(r, c));
        os << '\n';
    }
    return os.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline Grid grid_from_csv(std::istream& is) {
    Grid g;
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("grid file is empty");
    auto head = split_csv_line(line);
    g.corner = head.front();
    g.col_labels.assign(head.begin() + 1, head.end());
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != head.size())
            throw std::runtime_error("grid row has " + std::to_string(cells.size()) +
                                     " cells, header has " + std::to_string(head.size()));
        g.row_labels.push_back(cells.front());
        std::vector<double> vals;
        for (std::size_t i = 1; i < cells.size(); ++i) vals.push_back(std::stod(cells[i]));
        rows.push_back(std::move(vals));
    }
    g.values.resize(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(g.col_labels.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c)
            g.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    return g;
}

inline Grid grid_from_csv_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open grid file: " + path);
    return grid_from_csv(is);
}

// ---- figure dumps -----------------------------------------------------------

/// Fig.-3-style dump: the whole index-embedding weight matrix, one row per
/// vocabulary token (label = token string), one column per index slot.
template <class S>
Grid index_embedding_grid(ParameterStore<S>& store, const Vocabulary& vocab) {
    if (!store.has("index_embed"))
        throw std::runtime_error("checkpoint has no index embedding (ablated model?)");
    const Mat<S>& w = store.at("index_embed").value;
    Grid g;
    g.corner = "token";
    for (Eigen::Index c = 0; c < w.cols(); ++c) g.col_labels.push_back("k" + std::to_string(c));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
        g.row_labels.push_back(vocab.token(static_cast<int>(r)));
    g.values = w.template cast<double>();
    return g;
}

/// Fraction of index tokens whose row-argmax lands on the diagonal: the
/// 0-based index token "i" should peak at embedding column i (offset i),
/// matching out[k] = data[index[k]].
inline double diagonal_dominance(const Grid& g) {
    long hits = 0, total = 0;
    for (std::size_t r = 0; r < g.row_labels.size(); ++r) {
        const std::string& tok = g.row_labels[r];
        if (tok.empty() ||
            !std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); }))
            continue;
        const long idx = std::strtol(tok.c_str(), nullptr, 10);
        if (idx >= g.values.cols()) continue;
        ++total;
        Eigen::Index argmax = 0;
        g.values.row(static_cast<Eigen::Index>(r)).maxCoeff(&argmax);
        if (argmax == static_cast<Eigen::Index>(idx)) ++hits;
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

/// Fig.-4/5-style dump: the L x L data <- query association matrix of one
/// example, rows and columns labeled by source position.
inline Grid mdp_grid(const Eigen::MatrixXd& mdp) {
    Grid g;
    g.corner = "pos";
    for (Eigen::Index c = 0; c < mdp.cols(); ++c) g.col_labels.push_back("p" + std::to_string(c));
    for (Eigen::Index r = 0; r < mdp.rows(); ++r) g.row_labels.push_back("p" + std::to_string(r));
    g.values = mdp;
    return g;
}

// ---- run summaries ----------------------------------------------------------

struct RunSummary {
    std::string run_name;   // directory basename
    std::string model;
    std::string dataset;    // basename of the data directory
    double test_ta = 0.0;
    double test_wea = 0.0;
    bool diverged = false;
    bool complete = false;  // final record present
    int epochs_done = 0;
};

/// Reads one run directory (config.txt + metrics.jsonl). Returns nullopt when
/// the directory holds no metrics file.
inline std::optional<RunSummary> read_run_dir(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const fs::path metrics = dir / "metrics.jsonl";
    if (!fs::exists(metrics)) return std::nullopt;
    RunSummary s;
    s.run_name = dir.filename().string();
    std::ifstream is(metrics);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;
        if (j.contains("header")) {
            s.model = j["header"].value("model", "");
            s.dataset = fs::path(j["header"].value("data", "")).filename().string();
        } else if (j.contains("final")) {
            s.test_ta = j["final"].value("test_ta", 0.0);
            s.test_wea = j["final"].value("test_wea", 0.0);
            s.diverged = j["final"].value("diverged", false);
            s.complete = true;
        } else if (j.contains("epoch")) {
            s.epochs_done = j.value("epoch", 0);
        }
    }
    if (s.model.empty()) return std::nullopt;
    return s;
}

inline std::vector<RunSummary> scan_runs(const std::string& runs_dir) {
    namespace fs = std::filesystem;
    std::vector<RunSummary> out;
    if (!fs::exists(runs_dir)) return out;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(runs_dir))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
        if (auto s = read_run_dir(d)) out.push_back(*s);
        // Ablation suites nest one level deeper (suite/<flag>/metrics.jsonl).
        else if (fs::exists(d)) {
            std::vector<fs::path> subs;
            for (const auto& e : fs::directory_iterator(d))
                if (e.is_directory()) subs.push_back(e.path());
            std::sort(subs.begin(), subs.end());
            for (const auto& sd : subs)
                if (auto s2 = read_run_dir(sd)) {
                    s2->run_name = d.filename().string() + "/" + s2->run_name;
                    out.push_back(*s2);
                }
        }
    }
    return out;
}

inline std::string format_pct(double frac) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", frac * 100.0);
    return buf;
}

/// Groups runs into one markdown table per dataset (the dataset name encodes
/// problem and length, e.g. pd10, pi1-10, switch). Models appearing anywhere
/// in the group get a row; missing or incomplete cells render as "--".
inline std::string report_markdown(const std::vector<RunSummary>& runs) {
    std::ostringstream os;
    if (runs.empty()) {
        os << "# Results\n\nWARNING: no completed runs found.\n";
        return os.str();
    }
    std::map<std::string, std::vector<const RunSummary*>> by_dataset;
    for (const auto& r : runs) by_dataset[r.dataset].push_back(&r);
    os << "# Results\n";
    for (const auto& [dataset, group] : by_dataset) {
        os << "\n## " << dataset << "\n\n";
        os << "| Model | TA | WEA |\n| --- | --- | --- |\n";
        for (const RunSummary* r : group) {
            std::string label = r->model;
            if (r->run_name.find('/') != std::string::npos) label = r->run_name;
            os << "| " << label << " | ";
            if (!r->complete || r->diverged)
                os << "-- | -- |";
            else
                os << format_pct(r->test_ta) << " | " << format_pct(r->test_wea) << " |";
            if (r->diverged) os << " (diverged)";
            os << "\n";
        }
    }
    return os.str();
}

// ---- switch error locus -------------------------------------------------

struct ErrorLocus {
    long label_positions = 0;
    long label_errors = 0;
    long other_positions = 0;
    long other_errors = 0;

    long total_errors() const { return label_errors + other_errors; }
    double label_share() const {
        const long t = total_errors();
        return t == 0 ? 0.0 : static_cast<double>(label_errors) / static_cast<double>(t);
    }
};

/// Token-level error split for switch-corpus predictions: a position counts
/// as a case-label slot when the reference token right before it is `case`.
/// References and predictions exclude the leading <sos>; a short prediction
/// counts its missing tail as errors, mirroring token accuracy.
inline ErrorLocus error_locus(const std::vector<std::vector<std::string>>& preds,
                              const std::vector<std::vector<std::string>>& refs) {
    if (preds.size() != refs.size())
        throw std::invalid_argument("error_locus: prediction/reference count mismatch");
    ErrorLocus el;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto& ref = refs[i];
        const auto& pred = preds[i];
        for (std::size_t p = 0; p < ref.size(); ++p) {
            const bool is_label = p > 0 && ref[p - 1] == "case";
            const bool wrong = p >= pred.size() || pred[p] != ref[p];
            if (is_label) {
                ++el.label_positions;
                if (wrong) ++el.label_errors;
            } else {
                ++el.other_positions;
                if (wrong) ++el.other_errors;
            }
        }
    }
    return el;
}

inline std::string error_locus_markdown(const std::string& run_name, const ErrorLocus& el) {
    std::ostringstream os;
    os << "\n## Error locus: " << run_name << "\n\n";
    os << "| Position class | Tokens | Errors | Error rate | Share of all errors |\n";
    os << "| --- | --- | --- | --- | --- |\n";
    auto row = [&](const char* name, long pos, long err) {
        os << "| " << name << " | " << pos << " | " << err << " | "
           << format_pct(pos == 0 ? 0.0 : static_cast<double>(err) / static_cast<double>(pos))
           << " | "
           << format_pct(el.total_errors() == 0
                             ? 0.0
                             : static_cast<double>(err) /
                                   static_cast<double>(el.total_errors()))
           << " |\n";
    };
    row("case label", el.label_positions, el.label_errors);
    row("other", el.other_positions, el.other_errors);
    return os.str();
}

// ---- prediction dumps ------------------------------------------------------

struct PredictionFile {
    std::vector<std::vector<std::string>> preds, refs;
};

inline PredictionFile read_predictions(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open predictions: " + path);
    PredictionFile pf;
    std::string line;
    auto split_tokens = [](const std::string& s) {
        std::vector<std::string> out;
        std::istringstream ts(s);
        std::string tok;
        while (ts >> tok) out.push_back(tok);
        return out;
    };
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("predictions line " + std::to_string(lineno) +
                                     ": missing tab");
        pf.preds.push_back(split_tokens(line.substr(0, tab)));
        pf.refs.push_back(split_tokens(line.substr(tab + 1)));
    }
    return pf;
}

} // namespace permnet
