#pragma once

// CSV and JSON report writers. Every CSV starts with "# key=value" header
// lines (schema, config_hash, split_hash, preprocess); every JSON document
// carries the same keys at top level. Wall-clock timings never enter these
// files; they go to a separate *.timing.json sidecar.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cinemae/error.hpp"
#include "cinemae/eval.hpp"
#include "cinemae/model.hpp"

namespace cinemae::cli {

namespace fs = std::filesystem;

struct ReportHeader {
    std::string schema;
    std::string config_hash;
    std::string split_hash;
    std::string preprocess;
};

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

/// RFC 4180 quoting when a field needs it.
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::string csv_header(const ReportHeader& h) {
    return "# schema=" + h.schema + "\n# config_hash=" + h.config_hash + "\n# split_hash=" + h.split_hash +
           "\n# preprocess=" + h.preprocess + "\n";
}

inline nlohmann::json json_header(const ReportHeader& h) {
    return {{"schema", h.schema}, {"config_hash", h.config_hash}, {"split_hash", h.split_hash}, {"preprocess", h.preprocess}};
}

// ---- metrics ---------------------------------------------------------------

inline const char* kMetricsColumns = "accuracy,auc,fake_accuracy,real_accuracy,n_fake,n_real";

inline std::string metrics_cells(const eval::MetricsReport& r) {
    return num(r.accuracy) + "," + (r.auc ? num(*r.auc) : std::string()) + "," + num(r.fake_accuracy) + "," +
           num(r.real_accuracy) + "," + std::to_string(r.n_fake) + "," + std::to_string(r.n_real);
}

inline nlohmann::json to_json(const eval::MetricsReport& r) {
    return {{"accuracy", r.accuracy},
            {"auc", r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr)},
            {"fake_accuracy", r.fake_accuracy},
            {"real_accuracy", r.real_accuracy},
            {"n_fake", r.n_fake},
            {"n_real", r.n_real}};
}

inline void write_metrics(const fs::path& stem, ReportHeader h, const std::string& corpus, const eval::MetricsReport& r) {
    h.schema = "cinemae.metrics/1";
    write_text(stem.string() + ".csv", csv_header(h) + "corpus," + kMetricsColumns + "\n" + csv_field(corpus) + "," + metrics_cells(r) + "\n");
    auto j = json_header(h);
    j["corpus"] = corpus;
    j["metrics"] = to_json(r);
    write_text(stem.string() + ".json", j.dump(2) + "\n");
}

// ---- ablation ----------------------------------------------------------------

inline void write_ablation(const fs::path& stem, ReportHeader h, const eval::AblationTable& t) {
    h.schema = "cinemae.ablation/1";
    h.split_hash = t.split_hash;
    std::string csv = csv_header(h) + "# kind=" + eval::to_string(t.kind) + "\nconfig,note," + kMetricsColumns + ",split_hash\n";
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : t.rows) {
        csv += csv_field(r.config) + "," + csv_field(r.note) + "," + metrics_cells(r.metrics) + "," + r.split_hash + "\n";
        rows.push_back({{"config", r.config}, {"note", r.note}, {"metrics", to_json(r.metrics)}, {"split_hash", r.split_hash}});
    }
    write_text(stem.string() + ".csv", csv);
    auto j = json_header(h);
    j["kind"] = eval::to_string(t.kind);
    j["rows"] = rows;
    write_text(stem.string() + ".json", j.dump(2) + "\n");
}

inline nlohmann::json ablation_timing(const eval::AblationTable& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : t.rows) rows.push_back({{"config", r.config}, {"latency_ms_mean", r.metrics.latency_ms_mean}});
    return {{"schema", "cinemae.timing/1"}, {"rows", rows}};
}

// ---- cross-domain matrix ---------------------------------------------------------

inline void write_cross_matrix(const fs::path& stem, ReportHeader h, const std::string& scorer, const eval::CrossDomainMatrix& m) {
    h.schema = "cinemae.crossmatrix/1";
    std::string csv = csv_header(h) + "# scorer=" + scorer + "\ntrain\\test";
    for (const auto& s : m.sources) csv += "," + csv_field(s);
    csv += "\n";
    for (std::size_t i = 0; i < m.sources.size(); ++i) {
        csv += csv_field(m.sources[i]);
        for (double v : m.accuracy[i]) csv += "," + num(v);
        csv += "\n";
    }
    write_text(stem.string() + ".csv", csv);
    auto j = json_header(h);
    j["scorer"] = scorer;
    j["sources"] = m.sources;
    j["accuracy"] = m.accuracy;
    j["diagonal_mean"] = m.diagonal_mean();
    j["off_diagonal_mean"] = m.off_diagonal_mean();
    write_text(stem.string() + ".json", j.dump(2) + "\n");
}

// ---- NLL curve -----------------------------------------------------------------

inline void write_nll_curve(const fs::path& stem, ReportHeader h, const eval::NllCurve& c) {
    h.schema = "cinemae.nllcurve/1";
    std::string csv = csv_header(h) + "epoch,corpus,mean_nll\n";
    nlohmann::json initial = nlohmann::json::array(), records = nlohmann::json::array();
    for (const auto* part : {&c.initial, &c.records})
        for (const auto& p : *part) {
            csv += std::to_string(p.epoch) + "," + csv_field(p.corpus) + "," + num(p.mean_nll) + "\n";
            (part == &c.initial ? initial : records).push_back({{"epoch", p.epoch}, {"corpus", p.corpus}, {"mean_nll", p.mean_nll}});
        }
    write_text(stem.string() + ".csv", csv);
    auto j = json_header(h);
    j["initial"] = initial;
    j["records"] = records;
    write_text(stem.string() + ".json", j.dump(2) + "\n");
}

// ---- training log ----------------------------------------------------------------

inline std::string train_log_ndjson(const model::TrainLog& log) {
    std::string out = nlohmann::json{{"epoch", 0}, {"loss", log.initial_loss}}.dump() + "\n";
    for (const auto& r : log.epochs) out += model::to_json(r).dump() + "\n";
    return out;
}

}  // namespace cinemae::cli
