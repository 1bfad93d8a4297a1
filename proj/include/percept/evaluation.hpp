#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "percept/datasets.hpp"
#include "percept/predictors.hpp"
#include "percept/training.hpp"

namespace percept {

enum class ModelKind { ae, vae, p_ae, p_vae };

inline constexpr ModelKind kModelKinds[] = {ModelKind::ae, ModelKind::vae, ModelKind::p_ae, ModelKind::p_vae};

inline const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::ae: return "AE";
        case ModelKind::vae: return "VAE";
        case ModelKind::p_ae: return "P.AE";
        case ModelKind::p_vae: return "P.VAE";
    }
    return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
    for (ModelKind k : kModelKinds)
        if (s == to_string(k)) return k;
    throw std::invalid_argument("unknown model kind '" + s + "' (expected AE, VAE, P.AE or P.VAE)");
}

inline bool is_variational(ModelKind k) { return k == ModelKind::vae || k == ModelKind::p_vae; }
inline bool is_perceptual(ModelKind k) { return k == ModelKind::p_ae || k == ModelKind::p_vae; }

inline PredictorKind parse_predictor_kind(const std::string& s) {
    if (s == "mlp") return PredictorKind::mlp;
    if (s == "linear") return PredictorKind::linear;
    throw std::invalid_argument("unknown predictor kind '" + s + "'");
}

// ---------------------------------------------------------------- metrics

inline double positioning_error(const std::vector<Position>& preds, const std::vector<Position>& truths) {
    if (preds.empty()) throw std::invalid_argument("positioning_error: empty input");
    if (preds.size() != truths.size()) throw std::invalid_argument("positioning_error: length mismatch");
    long double acc = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) acc += std::hypot(preds[i].x - truths[i].x, preds[i].y - truths[i].y);
    return static_cast<double>(acc / preds.size());
}

inline double classification_accuracy(const std::vector<ClassId>& preds, const std::vector<ClassId>& truths) {
    if (preds.empty()) throw std::invalid_argument("classification_accuracy: empty input");
    if (preds.size() != truths.size()) throw std::invalid_argument("classification_accuracy: length mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == truths[i];
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// score_k = 100 * min(errors) / errors_k.
inline std::map<std::string, double> relative_recon_score(const std::map<std::string, double>& l1_errors) {
    if (l1_errors.empty()) throw std::invalid_argument("relative_recon_score: no errors given");
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [k, e] : l1_errors) {
        if (!(e > 0) || !std::isfinite(e))
            throw std::invalid_argument("relative_recon_score: error for " + k + " must be positive and finite");
        best = std::min(best, e);
    }
    std::map<std::string, double> out;
    for (const auto& [k, e] : l1_errors) out[k] = e == best ? 100.0 : 100.0 * best / e;
    return out;
}

/// Lower is better for positioning error, higher for accuracy.
inline bool metric_better(TaskKind task, double a, double b) { return task == TaskKind::positioning ? a < b : a > b; }

// ---------------------------------------------------------------- records

struct SeedSet {
    std::uint64_t run = 0;
    std::uint64_t model = 0;
    std::uint64_t data = 0;
    std::uint64_t extractor = 0;
    std::uint64_t probe = 0;
};

struct ExperimentRecord {
    std::string dataset;
    TaskKind task = TaskKind::positioning;
    int z_size = 0;
    ModelKind model_kind = ModelKind::ae;
    PredictorKind predictor_kind = PredictorKind::mlp;
    PredictorConfig best_predictor;
    int best_index = -1;
    double validation_loss = 0;
    double metric_value = 0;
    double recon_l1 = 0;
    RunTimings timings;
    SeedSet seeds;
    InputNorm norm = InputNorm::raw01;
    std::string extractor_id;
    std::string embedding = "mu";
    std::string decoder_retraining = "reinitialised";
    int failed_probes = 0;

    void validate() const {
        if (!(metric_value >= 0)) throw std::invalid_argument("ExperimentRecord: metric_value must be >= 0");
        if (task == TaskKind::classification && metric_value > 1)
            throw std::invalid_argument("ExperimentRecord: accuracy above 1");
    }
};

inline nlohmann::json to_json(const PredictorConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"hidden", c.hidden},
            {"activation", to_string(c.activation)},
            {"output_activation", to_string(c.output_activation)},
            {"input_dim", c.input_dim},
            {"output_dim", c.output_dim}};
}

inline PredictorConfig predictor_config_from_json(const nlohmann::json& j) {
    PredictorConfig c;
    c.kind = parse_predictor_kind(j.at("kind").get<std::string>());
    c.hidden = j.at("hidden").get<std::vector<int>>();
    c.activation = j.at("activation").get<std::string>() == "relu" ? Activation::rectify : Activation::sigmoid;
    c.output_activation = j.at("output_activation").get<std::string>() == "none" ? OutputActivation::none
                                                                                   : OutputActivation::softmax;
    c.input_dim = j.at("input_dim").get<int>();
    c.output_dim = j.at("output_dim").get<int>();
    return c;
}

inline nlohmann::json to_json(const ExperimentRecord& r) {
    return {{"dataset", r.dataset},
            {"task", r.task == TaskKind::positioning ? "positioning" : "classification"},
            {"z_size", r.z_size},
            {"model_kind", to_string(r.model_kind)},
            {"predictor_kind", to_string(r.predictor_kind)},
            {"best_predictor", to_json(r.best_predictor)},
            {"best_index", r.best_index},
            {"validation_loss", r.validation_loss},
            {"metric_value", r.metric_value},
            {"recon_l1", r.recon_l1},
            {"timings",
             {{"wall_seconds_total", r.timings.wall_seconds_total},
              {"seconds_per_epoch", r.timings.seconds_per_epoch},
              {"loss_kind", to_string(r.timings.loss_kind)}}},
            {"seeds",
             {{"run", r.seeds.run},
              {"model", r.seeds.model},
              {"data", r.seeds.data},
              {"extractor", r.seeds.extractor},
              {"probe", r.seeds.probe}}},
            {"normalization", to_string(r.norm)},
            {"extractor", r.extractor_id},
            {"embedding", r.embedding},
            {"decoder_retraining", r.decoder_retraining},
            {"failed_probes", r.failed_probes}};
}

inline ExperimentRecord record_from_json(const nlohmann::json& j) {
    ExperimentRecord r;
    r.dataset = j.at("dataset").get<std::string>();
    r.task = j.at("task").get<std::string>() == "positioning" ? TaskKind::positioning : TaskKind::classification;
    r.z_size = j.at("z_size").get<int>();
    r.model_kind = parse_model_kind(j.at("model_kind").get<std::string>());
    r.predictor_kind = parse_predictor_kind(j.at("predictor_kind").get<std::string>());
    r.best_predictor = predictor_config_from_json(j.at("best_predictor"));
    r.best_index = j.at("best_index").get<int>();
    r.validation_loss = j.at("validation_loss").get<double>();
    r.metric_value = j.at("metric_value").get<double>();
    r.recon_l1 = j.at("recon_l1").get<double>();
    const auto& t = j.at("timings");
    r.timings.wall_seconds_total = t.at("wall_seconds_total").get<double>();
    r.timings.seconds_per_epoch = t.at("seconds_per_epoch").get<std::vector<double>>();
    r.timings.loss_kind = parse_loss_kind(t.at("loss_kind").get<std::string>());
    const auto& s = j.at("seeds");
    r.seeds = {s.at("run").get<std::uint64_t>(), s.at("model").get<std::uint64_t>(), s.at("data").get<std::uint64_t>(),
               s.at("extractor").get<std::uint64_t>(), s.at("probe").get<std::uint64_t>()};
    r.norm = parse_input_norm(j.at("normalization").get<std::string>());
    r.extractor_id = j.at("extractor").get<std::string>();
    r.embedding = j.at("embedding").get<std::string>();
    r.decoder_retraining = j.at("decoder_retraining").get<std::string>();
    r.failed_probes = j.at("failed_probes").get<int>();
    return r;
}

// ---------------------------------------------------------------- selection

/// The test stage is the only holder of test-set access.
struct TestSetGate {
    static TestAccess grant() { return TestAccess{}; }
};

/// Index of the lowest validation loss among non-failed candidates; ties go
/// to the earlier index. Throws if every candidate failed.
inline std::size_t select_best(const std::vector<TrainedPredictor>& candidates) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (candidates[i].failed) continue;
        if (!best || candidates[i].validation_loss < candidates[*best].validation_loss) best = i;
    }
    if (!best) throw std::runtime_error("select_best: every candidate failed");
    return *best;
}

/// Validation results of one probe family on one trained autoencoder.
struct ProbeSearch {
    PredictorKind kind = PredictorKind::mlp;
    std::vector<PredictorConfig> expected;  // the configs that must be present, in grid order
    std::vector<TrainedPredictor> results;  // same order as `expected`
};

inline std::vector<std::string> missing_cells(const ProbeSearch& s) {
    std::vector<std::string> missing;
    for (std::size_t i = 0; i < s.expected.size(); ++i)
        if (i >= s.results.size() || !(s.results[i].config == s.expected[i]))
            missing.push_back(std::to_string(i) + ":" + s.expected[i].name());
    return missing;
}

struct TestOutcome {
    std::size_t best_index = 0;
    double validation_loss = 0;
    double metric_value = 0;
    int failed = 0;
};

/// Picks the best probe by validation loss and evaluates it once on the test
/// embeddings. Test embeddings must come from the same frozen encoder.
inline TestOutcome select_and_test(const ProbeSearch& search, const Tensor<double>& test_embeddings,
                                   const std::vector<Label>& test_labels) {
    const auto missing = missing_cells(search);
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw std::runtime_error("select_and_test: missing grid cells: " + list);
    }
    TestOutcome out;
    for (const auto& r : search.results) out.failed += r.failed;
    out.best_index = select_best(search.results);
    const TrainedPredictor& best = search.results[out.best_index];
    out.validation_loss = best.validation_loss;
    const Predictions p = predict(best, test_embeddings);
    if (best.task == TaskKind::positioning) {
        std::vector<Position> truth;
        for (const auto& l : test_labels) truth.push_back(std::get<Position>(l));
        out.metric_value = positioning_error(p.positions, truth);
    } else {
        std::vector<ClassId> truth;
        for (const auto& l : test_labels) truth.push_back(std::get<ClassId>(l));
        out.metric_value = classification_accuracy(p.classes, truth);
    }
    return out;
}

/// Reads the test part of a bundle: labels plus frozen-encoder embeddings and
/// the reconstruction L1 of the given model.
template <typename T>
struct TestView {
    Tensor<double> embeddings;
    std::vector<Label> labels;
    double recon_l1 = 0;
};

template <typename T>
TestView<T> read_test_part(const DatasetBundle& bundle, const AutoencoderModel<T>& model,
                           std::optional<std::size_t> limit = std::nullopt) {
    const SampleSource& test = bundle.test_part(TestSetGate::grant());
    std::vector<std::size_t> rows(limit ? std::min(*limit, test.size()) : test.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    TestView<T> v;
    v.embeddings = embed_rows(model, test, rows).template cast<double>();
    for (std::size_t i : rows) v.labels.push_back(*test.label(i));
    v.recon_l1 = reconstruction_l1(model, test, rows);
    return v;
}

// ---------------------------------------------------------------- tables

/// One results table: rows are z-sizes plus "Any", columns the four model kinds.
struct ResultTable {
    std::string dataset;
    std::string title;
    TaskKind task = TaskKind::positioning;
    std::vector<int> z_sizes;
    std::map<int, std::map<std::string, double>> cells;  // z -> kind -> value

    /// Column-wise best over z-rows.
    std::map<std::string, double> any_row() const {
        std::map<std::string, double> any;
        for (const auto& [z, row] : cells)
            for (const auto& [k, v] : row)
                if (!any.count(k) || metric_better(task, v, any[k])) any[k] = v;
        return any;
    }
};

inline ResultTable build_table(const std::vector<ExperimentRecord>& records, const std::string& dataset,
                               PredictorKind kind) {
    ResultTable t;
    t.dataset = dataset;
    t.title = dataset + " " + to_string(kind);
    std::set<int> zs;
    for (const auto& r : records) {
        if (r.dataset != dataset || r.predictor_kind != kind) continue;
        t.task = r.task;
        zs.insert(r.z_size);
        if (t.cells[r.z_size].count(to_string(r.model_kind)))
            throw std::invalid_argument("build_table: duplicate record for " + dataset + " z=" +
                                        std::to_string(r.z_size) + " " + to_string(r.model_kind));
        t.cells[r.z_size][to_string(r.model_kind)] = r.metric_value;
    }
    if (zs.empty()) throw std::invalid_argument("build_table: no records for " + dataset + " " + to_string(kind));
    t.z_sizes.assign(zs.begin(), zs.end());
    std::vector<std::string> missing;
    for (int z : t.z_sizes)
        for (ModelKind k : kModelKinds)
            if (!t.cells[z].count(to_string(k))) missing.push_back("z=" + std::to_string(z) + " " + to_string(k));
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw std::invalid_argument("build_table: incomplete records for " + t.title + ": " + list);
    }
    return t;
}

inline std::string format_value(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

inline std::string table_csv(const ResultTable& t) {
    std::ostringstream os;
    os << "z";
    for (ModelKind k : kModelKinds) os << ',' << to_string(k);
    os << '\n';
    for (int z : t.z_sizes) {
        os << z;
        for (ModelKind k : kModelKinds) os << ',' << format_value(t.cells.at(z).at(to_string(k)));
        os << '\n';
    }
    const auto any = t.any_row();
    os << "Any";
    for (ModelKind k : kModelKinds) os << ',' << format_value(any.at(to_string(k)));
    os << '\n';
    return os.str();
}

inline std::string table_text(const ResultTable& t) {
    std::ostringstream os;
    os << t.title << (t.task == TaskKind::positioning ? " (average test distance error, pixels)\n"
                                                      : " (test accuracy)\n");
    os << std::left << std::setw(6) << "z";
    for (ModelKind k : kModelKinds) os << std::right << std::setw(10) << to_string(k);
    os << '\n';
    auto row = [&](const std::string& label, const std::map<std::string, double>& vals) {
        os << std::left << std::setw(6) << label;
        for (ModelKind k : kModelKinds) {
            const double v = vals.at(to_string(k));
            os << std::right << std::setw(10) << std::fixed
               << std::setprecision(t.task == TaskKind::positioning ? 2 : 3) << v;
        }
        os << '\n';
    };
    for (int z : t.z_sizes) row(std::to_string(z), t.cells.at(z));
    row("Any", t.any_row());
    return os.str();
}

/// Parses a table CSV back into rows: label -> kind -> value.
inline std::map<std::string, std::map<std::string, double>> parse_table_csv(const std::string& csv) {
    std::istringstream is(csv);
    std::string line;
    if (!std::getline(is, line)) throw std::invalid_argument("parse_table_csv: empty input");
    std::vector<std::string> header;
    {
        std::istringstream hs(line);
        std::string cell;
        while (std::getline(hs, cell, ',')) header.push_back(cell);
    }
    std::map<std::string, std::map<std::string, double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string label, cell;
        std::getline(ls, label, ',');
        for (std::size_t c = 1; std::getline(ls, cell, ','); ++c) {
            if (c >= header.size()) throw std::invalid_argument("parse_table_csv: too many columns");
            rows[label][header[c]] = std::stod(cell);
        }
    }
    return rows;
}

/// Per-dataset relative reconstruction scores, each kind using its best L1 over z.
struct ReconTable {
    std::vector<std::string> datasets;
    std::map<std::string, std::map<std::string, double>> l1;     // dataset -> kind -> best L1
    std::map<std::string, std::map<std::string, double>> score;  // dataset -> kind -> percent
};

inline ReconTable build_recon_table(const std::vector<ExperimentRecord>& records) {
    ReconTable t;
    for (const auto& r : records) {
        if (r.predictor_kind != PredictorKind::mlp) continue;
        auto& row = t.l1[r.dataset];
        const std::string k = to_string(r.model_kind);
        if (!row.count(k) || r.recon_l1 < row[k]) row[k] = r.recon_l1;
    }
    for (const auto& [ds, row] : t.l1) {
        for (ModelKind k : kModelKinds)
            if (!row.count(to_string(k)))
                throw std::invalid_argument("build_recon_table: no " + std::string(to_string(k)) + " record for " + ds);
        t.datasets.push_back(ds);
        t.score[ds] = relative_recon_score(row);
    }
    if (t.datasets.empty()) throw std::invalid_argument("build_recon_table: no records");
    return t;
}

inline std::string recon_csv(const ReconTable& t) {
    std::ostringstream os;
    os << "dataset";
    for (ModelKind k : kModelKinds) os << ',' << to_string(k);
    os << '\n';
    for (const auto& ds : t.datasets) {
        os << ds;
        for (ModelKind k : kModelKinds) os << ',' << format_value(t.score.at(ds).at(to_string(k)));
        os << '\n';
    }
    return os.str();
}

inline std::string recon_text(const ReconTable& t) {
    std::ostringstream os;
    os << "Reconstruction after decoder retraining, relative to the lowest L1 error (percent)\n";
    os << std::left << std::setw(14) << "dataset";
    for (ModelKind k : kModelKinds) os << std::right << std::setw(10) << to_string(k);
    os << '\n';
    for (const auto& ds : t.datasets) {
        os << std::left << std::setw(14) << ds;
        for (ModelKind k : kModelKinds)
            os << std::right << std::setw(9) << std::fixed << std::setprecision(0) << t.score.at(ds).at(to_string(k))
               << '%';
        os << '\n';
    }
    return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        os << content;
        if (!os) throw std::runtime_error("cannot write " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

/// Writes <dataset>_mlp / <dataset>_linear tables and recon_relative, each as
/// .csv and .txt. Returns the written paths.
inline std::vector<std::filesystem::path> emit_tables(const std::vector<ExperimentRecord>& records,
                                                      const std::filesystem::path& dir) {
    if (records.empty()) throw std::invalid_argument("emit_tables: no records");
    std::set<std::string> datasets;
    for (const auto& r : records) {
        r.validate();
        datasets.insert(r.dataset);
    }
    std::vector<std::filesystem::path> written;
    for (const auto& ds : datasets) {
        for (PredictorKind pk : {PredictorKind::mlp, PredictorKind::linear}) {
            const ResultTable t = build_table(records, ds, pk);
            const std::string stem = ds + "_" + to_string(pk);
            write_text_file(dir / (stem + ".csv"), table_csv(t));
            write_text_file(dir / (stem + ".txt"), table_text(t));
            written.push_back(dir / (stem + ".csv"));
            written.push_back(dir / (stem + ".txt"));
        }
    }
    const ReconTable rt = build_recon_table(records);
    write_text_file(dir / "recon_relative.csv", recon_csv(rt));
    write_text_file(dir / "recon_relative.txt", recon_text(rt));
    written.push_back(dir / "recon_relative.csv");
    written.push_back(dir / "recon_relative.txt");
    return written;
}

// ---------------------------------------------------------------- image grids

/// Binary PPM (P6) of a [3,H,W] float image in [0,1].
inline void write_ppm(const std::filesystem::path& path, const Tensor<float>& img) {
    if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("write_ppm: expected [3,H,W]");
    const int h = img.dim(1), w = img.dim(2);
    std::ostringstream os;
    os << "P6\n" << w << ' ' << h << "\n255\n";
    std::string data = os.str();
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                const float v = std::clamp(img[(static_cast<std::size_t>(ch) * h + r) * w + c], 0.0f, 1.0f);
                data.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
            }
    write_text_file(path, data);
}

inline Tensor<float> read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    in >> magic >> w >> h >> maxv;
    in.get();
    if (!in || magic != "P6" || maxv != 255 || w <= 0 || h <= 0)
        throw std::runtime_error("read_ppm: unsupported file " + path.string());
    Tensor<float> img({3, h, w});
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                const int v = in.get();
                if (v < 0) throw std::runtime_error("read_ppm: truncated " + path.string());
                img[(static_cast<std::size_t>(ch) * h + r) * w + c] = static_cast<float>(v) / 255.0f;
            }
    return img;
}

/// Lays out rows of equally sized [3,S,S] images into one image with a 2px gap.
inline Tensor<float> tile_rows(const std::vector<std::vector<Tensor<float>>>& rows) {
    if (rows.empty() || rows.front().empty()) throw std::invalid_argument("tile_rows: nothing to tile");
    const int s = rows.front().front().dim(1), gap = 2;
    std::size_t cols = 0;
    for (const auto& r : rows) cols = std::max(cols, r.size());
    const int h = static_cast<int>(rows.size()) * (s + gap) - gap, w = static_cast<int>(cols) * (s + gap) - gap;
    Tensor<float> out({3, h, w});
    out.fill(1.0f);
    for (std::size_t ri = 0; ri < rows.size(); ++ri)
        for (std::size_t ci = 0; ci < rows[ri].size(); ++ci) {
            const auto& img = rows[ri][ci];
            if (img.dim(1) != s || img.dim(2) != s) throw std::invalid_argument("tile_rows: mixed image sizes");
            for (int ch = 0; ch < 3; ++ch)
                for (int r = 0; r < s; ++r)
                    for (int c = 0; c < s; ++c)
                        out[(static_cast<std::size_t>(ch) * h + ri * (s + gap) + r) * w + ci * (s + gap) + c] =
                            img[(static_cast<std::size_t>(ch) * s + r) * s + c];
        }
    return out;
}

/// Stacks [3,H,W] images top to bottom with a 4px white gap; narrower images are padded.
inline Tensor<float> stack_vertical(const std::vector<Tensor<float>>& images) {
    if (images.empty()) throw std::invalid_argument("stack_vertical: nothing to stack");
    const int gap = 4;
    int h = 0, w = 0;
    for (const auto& img : images) {
        h += img.dim(1) + gap;
        w = std::max(w, img.dim(2));
    }
    h -= gap;
    Tensor<float> out({3, h, w});
    out.fill(1.0f);
    int top = 0;
    for (const auto& img : images) {
        const int ih = img.dim(1), iw = img.dim(2);
        for (int ch = 0; ch < 3; ++ch)
            for (int r = 0; r < ih; ++r)
                std::copy_n(img.data() + (static_cast<std::size_t>(ch) * ih + r) * iw, iw,
                            out.data() + (static_cast<std::size_t>(ch) * h + top + r) * w);
        top += ih + gap;
    }
    return out;
}

}  // namespace percept
