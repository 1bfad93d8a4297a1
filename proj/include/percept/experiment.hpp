#pragma once

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "percept/config.hpp"
#include "percept/datasets.hpp"
#include "percept/evaluation.hpp"
#include "percept/formats.hpp"
#include "percept/hash.hpp"
#include "percept/lander.hpp"
#include "percept/losses.hpp"
#include "percept/models.hpp"
#include "percept/perceptual.hpp"
#include "percept/predictors.hpp"
#include "percept/training.hpp"
#include "percept/weights_io.hpp"

namespace percept {

enum class Profile { paper, desk };

inline const char* to_string(Profile p) { return p == Profile::paper ? "paper" : "desk"; }

inline Profile parse_profile(const std::string& s) {
    if (s == "paper") return Profile::paper;
    if (s == "desk") return Profile::desk;
    throw std::invalid_argument("unknown profile '" + s + "' (expected paper or desk)");
}

/// z-sizes evaluated per dataset.
inline std::vector<int> paper_z_sizes(const std::string& dataset) {
    if (dataset == "lander") return {32, 64, 128, 256};
    if (dataset == "stl10") return {64, 128, 256, 512};
    if (dataset == "svhn") return {32, 64, 128};
    throw std::invalid_argument("unknown dataset '" + dataset + "'");
}

/// Everything that determines the results of a run matrix.
struct ExperimentMatrix {
    Profile profile = Profile::desk;
    std::vector<std::string> datasets;
    std::map<std::string, std::vector<int>> z_sizes;
    std::vector<ModelKind> model_kinds;
    std::vector<std::uint64_t> seeds;
    TrainConfig train;
    TrainConfig retrain;
    ProbeOptions probe;
    bool probe_linear = true;
    double kl_weight = 1.0;
    Reduction reduction = Reduction::mean;
    InputNorm norm = InputNorm::raw01;
    std::string extractor_weights;  // empty: seeded random extractor
    std::uint64_t extractor_seed = 1;
    SceneConfig lander;
    std::string lander_dir;  // empty: generate in memory from (lander, seed)
    std::map<std::string, PartLimits> limits;
    std::filesystem::path data_root = default_data_root();
    int recon_grid = 8;

    static ExperimentMatrix defaults(Profile p) {
        ExperimentMatrix m;
        m.profile = p;
        m.model_kinds.assign(std::begin(kModelKinds), std::end(kModelKinds));
        m.train.adam_eps = m.retrain.adam_eps = 1e-14;
        if (p == Profile::paper) {
            m.datasets = {"lander", "stl10", "svhn"};
            for (const auto& d : m.datasets) m.z_sizes[d] = paper_z_sizes(d);
            m.seeds = {1};
        } else {
            m.datasets = {"lander"};
            m.z_sizes["lander"] = {32};
            m.seeds = {1};
            m.lander.frame_stride = 20;
            m.train.lr = 1e-3;
            m.train.batch_size = 32;
            m.train.max_epochs = 8;
            m.train.patience = 3;
            m.retrain = m.train;
            m.retrain.max_epochs = 4;
            m.retrain.patience = 2;
            m.probe.max_epochs = 60;
            m.probe.patience = 8;
            m.limits["stl10"] = {20000, 5000, 8000};
            m.limits["svhn"] = {20000, 20000, 8000};
        }
        return m;
    }

    static const std::set<std::string>& known_keys() {
        static const std::set<std::string> keys = {
            "profile", "datasets", "model_kinds", "seeds", "data_root",
            "train.lr", "train.batch_size", "train.max_epochs", "train.patience", "train.adam_eps",
            "retrain.lr", "retrain.batch_size", "retrain.max_epochs", "retrain.patience", "retrain.adam_eps",
            "probe.lr", "probe.batch_size", "probe.max_epochs", "probe.patience", "probe.linear", "probe.standardize",
            "vae.kl_weight", "loss.reduction", "extractor.weights", "extractor.seed", "extractor.norm",
            "lander.dir", "recon_grid"};
        return keys;
    }

    /// Builds a matrix from a config, starting from the profile's defaults.
    /// `profile_override` (from the command line) wins over the file.
    static ExperimentMatrix from_config(const Config& c, std::optional<Profile> profile_override = std::nullopt) {
        c.require_known(known_keys(), {"z_sizes.", "lander.", "limits."});
        Profile p = profile_override.value_or(Profile::desk);
        if (!profile_override && c.has("profile")) {
            try {
                p = parse_profile(c.get("profile", ""));
            } catch (const std::invalid_argument& e) {
                throw c.error_at("profile", e.what());
            }
        }
        ExperimentMatrix m = defaults(p);
        auto wrap = [&](const std::string& key, auto&& fn) {
            if (!c.has(key)) return;
            try {
                fn();
            } catch (const ConfigError&) {
                throw;
            } catch (const std::exception& e) {
                throw c.error_at(key, e.what());
            }
        };
        wrap("datasets", [&] {
            m.datasets = c.get_list("datasets", {});
            for (const auto& d : m.datasets)
                if (!m.z_sizes.count(d)) m.z_sizes[d] = p == Profile::desk ? std::vector<int>{paper_z_sizes(d).front()}
                                                                           : paper_z_sizes(d);
        });
        for (const auto& [key, entry] : c.entries()) {
            if (key.rfind("z_sizes.", 0) == 0) {
                wrap(key, [&] {
                    std::vector<int> zs;
                    for (long long z : c.get_int_list(key, {})) {
                        if (!valid_z_size(static_cast<int>(z))) throw std::invalid_argument("invalid z size " + std::to_string(z));
                        zs.push_back(static_cast<int>(z));
                    }
                    m.z_sizes[key.substr(8)] = zs;
                });
            } else if (key.rfind("lander.", 0) == 0 && key != "lander.dir") {
                wrap(key, [&] {
                    if (!set_scene_field(m.lander, key.substr(7), c.get_double(key, 0)))
                        throw std::invalid_argument("unknown lander field '" + key.substr(7) + "'");
                });
            } else if (key.rfind("limits.", 0) == 0) {
                wrap(key, [&] {
                    const std::string rest = key.substr(7);
                    const auto dot = rest.find('.');
                    if (dot == std::string::npos) throw std::invalid_argument("expected limits.<dataset>.<part>");
                    auto& l = m.limits[rest.substr(0, dot)];
                    const std::string part = rest.substr(dot + 1);
                    const auto v = static_cast<std::size_t>(c.get_int(key, 0));
                    if (part == "autoencoder") l.autoencoder = v;
                    else if (part == "predictor") l.predictor = v;
                    else if (part == "test") l.test = v;
                    else throw std::invalid_argument("unknown part '" + part + "'");
                });
            }
        }
        wrap("model_kinds", [&] {
            m.model_kinds.clear();
            for (const auto& k : c.get_list("model_kinds", {})) m.model_kinds.push_back(parse_model_kind(k));
        });
        wrap("seeds", [&] {
            m.seeds.clear();
            for (long long s : c.get_int_list("seeds", {})) m.seeds.push_back(static_cast<std::uint64_t>(s));
        });
        wrap("data_root", [&] { m.data_root = c.get("data_root", ""); });
        auto train_keys = [&](const std::string& prefix, TrainConfig& t) {
            wrap(prefix + ".lr", [&] { t.lr = c.get_double(prefix + ".lr", t.lr); });
            wrap(prefix + ".batch_size", [&] { t.batch_size = static_cast<int>(c.get_int(prefix + ".batch_size", 0)); });
            wrap(prefix + ".max_epochs", [&] { t.max_epochs = static_cast<int>(c.get_int(prefix + ".max_epochs", 0)); });
            wrap(prefix + ".patience", [&] { t.patience = static_cast<int>(c.get_int(prefix + ".patience", 0)); });
            wrap(prefix + ".adam_eps", [&] {
                t.adam_eps = c.get_double(prefix + ".adam_eps", 0);
                if (!(t.adam_eps > 0)) throw std::invalid_argument("adam_eps must be positive");
            });
        };
        train_keys("train", m.train);
        train_keys("retrain", m.retrain);
        wrap("probe.lr", [&] { m.probe.lr = c.get_double("probe.lr", 0); });
        wrap("probe.batch_size", [&] { m.probe.batch_size = static_cast<int>(c.get_int("probe.batch_size", 0)); });
        wrap("probe.max_epochs", [&] { m.probe.max_epochs = static_cast<int>(c.get_int("probe.max_epochs", 0)); });
        wrap("probe.patience", [&] { m.probe.patience = static_cast<int>(c.get_int("probe.patience", 0)); });
        wrap("probe.linear", [&] { m.probe_linear = c.get_int("probe.linear", 1) != 0; });
        wrap("probe.standardize", [&] { m.probe.standardize = c.get_int("probe.standardize", 1) != 0; });
        wrap("vae.kl_weight", [&] { m.kl_weight = c.get_double("vae.kl_weight", 0); });
        wrap("loss.reduction", [&] { m.reduction = parse_reduction(c.get("loss.reduction", "")); });
        wrap("extractor.weights", [&] { m.extractor_weights = c.get("extractor.weights", ""); });
        wrap("extractor.seed", [&] { m.extractor_seed = static_cast<std::uint64_t>(c.get_int("extractor.seed", 0)); });
        wrap("extractor.norm", [&] { m.norm = parse_input_norm(c.get("extractor.norm", "")); });
        wrap("lander.dir", [&] { m.lander_dir = c.get("lander.dir", ""); });
        wrap("recon_grid", [&] { m.recon_grid = static_cast<int>(c.get_int("recon_grid", 0)); });
        try {
            m.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("<config>", 0, e.what());
        }
        return m;
    }

    void validate() const {
        if (datasets.empty()) throw std::invalid_argument("no datasets declared");
        if (model_kinds.empty()) throw std::invalid_argument("no model kinds declared");
        if (seeds.empty()) throw std::invalid_argument("no seeds declared");
        for (const auto& d : datasets) {
            if (d != "lander" && d != "stl10" && d != "svhn") throw std::invalid_argument("unknown dataset '" + d + "'");
            auto it = z_sizes.find(d);
            if (it == z_sizes.end() || it->second.empty()) throw std::invalid_argument("no z sizes for " + d);
            for (int z : it->second)
                if (!valid_z_size(z)) throw std::invalid_argument("invalid z size " + std::to_string(z));
        }
        train.validate();
        retrain.validate();
        if (probe.batch_size < 1 || probe.max_epochs < 1 || probe.patience < 1 || !(probe.lr > 0))
            throw std::invalid_argument("invalid probe settings");
        if (!(kl_weight >= 0)) throw std::invalid_argument("vae.kl_weight must be >= 0");
        lander.validate();
    }

    /// Number of autoencoder trainings the matrix declares.
    std::size_t autoencoder_runs() const {
        std::size_t n = 0;
        for (const auto& d : datasets) n += z_sizes.at(d).size() * model_kinds.size() * seeds.size();
        return n;
    }
};

inline nlohmann::json to_json(const TrainConfig& t) {
    return {{"lr", t.lr}, {"batch_size", t.batch_size}, {"max_epochs", t.max_epochs}, {"patience", t.patience},
            {"seed", t.seed}, {"adam_eps", t.adam_eps}};
}

/// One (dataset, z, model kind, seed) unit of work. `canonical` holds every
/// setting that influences its results; the cell directory is its hash.
struct CellSpec {
    std::string dataset;
    int z_size = 0;
    ModelKind kind = ModelKind::ae;
    std::uint64_t seed = 0;
    SeedSet seeds;
    nlohmann::json canonical;

    std::string hash() const { return sha256_hex(canonical.dump()); }
    std::string label() const {
        return dataset + " z=" + std::to_string(z_size) + " " + to_string(kind) + " seed=" + std::to_string(seed);
    }
};

inline std::string extractor_identity(const ExperimentMatrix& m) {
    if (m.extractor_weights.empty()) return "random:" + std::to_string(m.extractor_seed);
    return "file:" + file_digest(m.extractor_weights, "SHA256");
}

inline std::vector<CellSpec> enumerate_cells(const ExperimentMatrix& m) {
    const std::string extractor = extractor_identity(m);
    std::vector<CellSpec> cells;
    for (const auto& d : m.datasets)
        for (std::uint64_t seed : m.seeds)
            for (int z : m.z_sizes.at(d))
                for (ModelKind k : m.model_kinds) {
                    CellSpec c;
                    c.dataset = d;
                    c.z_size = z;
                    c.kind = k;
                    c.seed = seed;
                    // Kinds of one (dataset, z, seed) share data, initialisation and batch order.
                    c.seeds.run = seed;
                    c.seeds.data = seed;
                    c.seeds.model = derive_seed(seed, 0x30de1, static_cast<std::uint64_t>(z));
                    c.seeds.probe = derive_seed(seed, 0x9b0be, static_cast<std::uint64_t>(z));
                    c.seeds.extractor = m.extractor_seed;
                    TrainConfig tr = m.train, rt = m.retrain;
                    tr.seed = derive_seed(seed, 0x7a1, static_cast<std::uint64_t>(z));
                    rt.seed = derive_seed(seed, 0x4e7, static_cast<std::uint64_t>(z));
                    nlohmann::json data;
                    if (d == "lander") {
                        if (!m.lander_dir.empty()) data["dir"] = std::filesystem::absolute(m.lander_dir).string();
                        else
                            for (const auto& [key, v] : scene_fields(m.lander)) data[key] = v;
                    } else {
                        const PartLimits l = m.limits.count(d) ? m.limits.at(d) : PartLimits{};
                        data = {{"autoencoder", l.autoencoder}, {"predictor", l.predictor}, {"test", l.test}};
                    }
                    c.canonical = {{"dataset", d},
                                   {"data", data},
                                   {"z_size", z},
                                   {"model_kind", to_string(k)},
                                   {"seeds",
                                    {{"run", seed}, {"model", c.seeds.model}, {"probe", c.seeds.probe},
                                     {"extractor", c.seeds.extractor}}},
                                   {"train", to_json(tr)},
                                   {"retrain", to_json(rt)},
                                   {"probe",
                                    {{"lr", m.probe.lr}, {"batch_size", m.probe.batch_size},
                                     {"max_epochs", m.probe.max_epochs}, {"patience", m.probe.patience},
                                     {"linear", m.probe_linear}, {"standardize", m.probe.standardize}}},
                                   {"kl_weight", is_variational(k) ? m.kl_weight : 0.0},
                                   {"reduction", to_string(m.reduction)},
                                   {"extractor", is_perceptual(k) ? extractor : std::string("none")},
                                   {"normalization", to_string(m.norm)},
                                   {"embedding", "mu"},
                                   {"decoder_retraining", "reinitialised"},
                                   {"recon_grid", m.recon_grid}};
                    cells.push_back(std::move(c));
                }
    return cells;
}

// ---------------------------------------------------------------- running

using Logger = std::function<void(const std::string&)>;

inline DatasetBundle load_bundle(const ExperimentMatrix& m, const std::string& dataset, std::uint64_t seed) {
    if (dataset == "lander") {
        if (!m.lander_dir.empty()) return read_lander_collection(m.lander_dir);
        return generate_lander_collection(m.lander, seed);
    }
    const PartLimits l = m.limits.count(dataset) ? m.limits.at(dataset) : PartLimits{};
    return load_classification_dataset(dataset, m.data_root, seed, l);
}

inline PerceptualExtractor<float> load_matrix_extractor(const ExperimentMatrix& m) {
    if (m.extractor_weights.empty()) return random_extractor<float>(m.extractor_seed);
    return load_extractor<float>(m.extractor_weights);
}

struct CellResult {
    std::vector<ExperimentRecord> records;
    TrainHistory history;
    TrainHistory retrain_history;
};

inline std::vector<Label> labels_of(const SampleSource& src) {
    std::vector<Label> out;
    out.reserve(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto l = src.label(i);
        if (!l) throw std::runtime_error("unlabelled sample " + std::to_string(i) + " in a labelled part");
        out.push_back(*l);
    }
    return out;
}

/// Reconstructions of the first `count` test images: originals on the top
/// row, reconstructions below.
template <typename T>
Tensor<float> reconstruction_grid(const DatasetBundle& bundle, const AutoencoderModel<T>& model, int count) {
    const SampleSource& test = bundle.test_part(TestSetGate::grant());
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < std::min<std::size_t>(static_cast<std::size_t>(count), test.size()); ++i) rows.push_back(i);
    const Tensor<T> x = load_batch(test, rows).template cast<T>();
    const Tensor<float> y = model.decode(model.embed(x)).template cast<float>();
    const Tensor<float> xf = x.template cast<float>();
    std::vector<std::vector<Tensor<float>>> grid(2);
    const int s = model.input_size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        Tensor<float> a({3, s, s}), b({3, s, s});
        std::copy_n(xf.data() + i * a.size(), a.size(), a.data());
        std::copy_n(y.data() + i * b.size(), b.size(), b.data());
        grid[0].push_back(std::move(a));
        grid[1].push_back(std::move(b));
    }
    return tile_rows(grid);
}

/// Runs one cell end to end and writes its artifacts into `dir`:
/// model.wts, manifest.json, history.csv, retrain_history.csv, probes.csv,
/// recon.ppm and (last, atomically) record.json.
inline CellResult run_cell(const ExperimentMatrix& m, const CellSpec& cell, const DatasetBundle& bundle,
                           const PerceptualExtractor<float>* extractor, const std::filesystem::path& dir,
                           const Logger& log = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto say = [&](const std::string& s) {
        if (log) log("[" + cell.label() + "] " + s);
    };
    const bool perceptual = is_perceptual(cell.kind);
    if (perceptual && extractor == nullptr) throw std::invalid_argument("run_cell: perceptual cell needs an extractor");

    AutoencoderModel<float> model = build_model<float>(cell.z_size, is_variational(cell.kind), bundle.side(), cell.seeds.model);
    LossSpec<float> spec;
    spec.kind = perceptual ? LossKind::perceptual : LossKind::pixelwise;
    spec.reduction = m.reduction;
    spec.kl_weight = is_variational(cell.kind) ? m.kl_weight : 0.0;
    spec.extractor = perceptual ? extractor : nullptr;
    spec.norm = m.norm;

    TrainConfig tr = m.train, rt = m.retrain;
    tr.seed = cell.canonical["train"]["seed"].get<std::uint64_t>();
    rt.seed = cell.canonical["retrain"]["seed"].get<std::uint64_t>();

    CellResult result;
    say("training autoencoder");
    result.history = train_autoencoder(model, bundle.autoencoder_part(), spec, tr, [&](const EpochStats& e) {
        std::ostringstream os;
        os << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " (" << std::fixed
           << std::setprecision(1) << e.seconds << "s)";
        say(os.str());
        return true;
    });
    write_history_csv(result.history, dir / "history.csv");
    write_weights(dir / "model.wts", to_weights(model.params()));
    {
        nlohmann::json manifest = {{"z_size", cell.z_size},
                                   {"variational", is_variational(cell.kind)},
                                   {"input_size", bundle.side()},
                                   {"seeds", cell.canonical["seeds"]},
                                   {"loss_kind", to_string(spec.kind)},
                                   {"normalization", to_string(m.norm)},
                                   {"encoder_sha256", encoder_hash(model)}};
        write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
    }

    // Probes on frozen mean embeddings.
    const DataPart& pp = bundle.predictor_part();
    say("embedding predictor part");
    const Tensor<double> emb = embed_all(model, *pp.source).cast<double>();
    const std::vector<Label> labels = labels_of(*pp.source);
    ProbeOptions po = m.probe;
    po.target_scale = bundle.task() == TaskKind::positioning ? bundle.side() : 1.0;
    const int out_dim = bundle.task() == TaskKind::positioning ? 2 : *bundle.num_classes();

    std::vector<ProbeSearch> searches;
    ProbeSearch mlp{PredictorKind::mlp, enumerate_mlp_grid(cell.z_size, out_dim), {}};
    searches.push_back(std::move(mlp));
    if (m.probe_linear) searches.push_back({PredictorKind::linear, {linear_config(cell.z_size, out_dim)}, {}});
    std::ostringstream probes_csv;
    probes_csv << "family,index,config,validation_loss,epochs,failed\n" << std::setprecision(17);
    for (auto& s : searches) {
        say(std::string("training ") + to_string(s.kind) + " probes (" + std::to_string(s.expected.size()) + ")");
        for (std::size_t i = 0; i < s.expected.size(); ++i) {
            s.results.push_back(train_predictor(s.expected[i], emb, labels, bundle.num_classes(), pp.train,
                                                pp.validation, derive_seed(cell.seeds.probe, i), po));
            const auto& r = s.results.back();
            probes_csv << to_string(s.kind) << ',' << i << ',' << r.config.name() << ',' << r.validation_loss << ','
                       << r.epochs << ',' << (r.failed ? 1 : 0) << '\n';
        }
    }
    write_text_file(dir / "probes.csv", probes_csv.str());

    say("retraining decoder");
    result.retrain_history = retrain_decoder(model, bundle.autoencoder_part(), rt);
    write_history_csv(result.retrain_history, dir / "retrain_history.csv");
    write_weights(dir / "model_retrained.wts", to_weights(model.params()));

    say("testing");
    const TestView<float> test = read_test_part(bundle, model);
    if (m.recon_grid > 0) write_ppm(dir / "recon.ppm", reconstruction_grid(bundle, model, m.recon_grid));
    for (const auto& s : searches) {
        const TestOutcome o = select_and_test(s, test.embeddings, test.labels);
        ExperimentRecord r;
        r.dataset = cell.dataset;
        r.task = bundle.task();
        r.z_size = cell.z_size;
        r.model_kind = cell.kind;
        r.predictor_kind = s.kind;
        r.best_predictor = s.results[o.best_index].config;
        r.best_index = static_cast<int>(o.best_index);
        r.validation_loss = o.validation_loss;
        r.metric_value = o.metric_value;
        r.recon_l1 = test.recon_l1;
        r.timings = result.history.timings;
        r.seeds = cell.seeds;
        r.norm = m.norm;
        r.extractor_id = cell.canonical["extractor"].get<std::string>();
        r.failed_probes = o.failed;
        r.validate();
        result.records.push_back(r);
        std::ostringstream os;
        os << to_string(s.kind) << " best " << r.best_predictor.name() << " test metric " << r.metric_value
           << ", recon L1 " << r.recon_l1;
        say(os.str());
    }

    nlohmann::json rec = {{"cell", cell.canonical}, {"hash", cell.hash()}, {"records", nlohmann::json::array()}};
    for (const auto& r : result.records) rec["records"].push_back(to_json(r));
    rec["autoencoder"] = {{"best_epoch", result.history.best_epoch},
                          {"best_val", result.history.best_val},
                          {"epochs", result.history.epochs.size()}};
    rec["retrain"] = {{"best_epoch", result.retrain_history.best_epoch},
                      {"best_val", result.retrain_history.best_val},
                      {"epochs", result.retrain_history.epochs.size()}};
    write_text_file(dir / "record.json", rec.dump(2) + "\n");
    fs::remove(dir / "error.txt");
    return result;
}

struct RunSummary {
    std::size_t total = 0;
    std::size_t skipped = 0;
    std::size_t completed = 0;
    std::vector<std::string> failed;  // cell labels with their error
};

inline std::filesystem::path cell_dir(const std::filesystem::path& out, const CellSpec& c) {
    return out / "cells" / c.hash();
}

inline bool cell_complete(const std::filesystem::path& out, const CellSpec& c) {
    return std::filesystem::exists(cell_dir(out, c) / "record.json");
}

/// Runs every incomplete cell of the matrix. Completed cells (record.json
/// present under their config hash) are skipped. With jobs > 1 cells run in
/// forked worker processes.
inline RunSummary run_matrix(const ExperimentMatrix& m, const std::filesystem::path& out, int jobs = 1,
                             const Logger& log = {}) {
    namespace fs = std::filesystem;
    m.validate();
    fs::create_directories(out / "cells");
    const auto cells = enumerate_cells(m);
    RunSummary summary;
    summary.total = cells.size();

    std::vector<const CellSpec*> todo;
    for (const auto& c : cells) {
        if (cell_complete(out, c)) {
            ++summary.skipped;
            if (log) log("[" + c.label() + "] complete, skipping");
        } else {
            todo.push_back(&c);
        }
    }

    auto execute = [&](const CellSpec& c) -> std::optional<std::string> {
        const fs::path dir = cell_dir(out, c);
        try {
            const DatasetBundle bundle = load_bundle(m, c.dataset, c.seeds.data);
            std::optional<PerceptualExtractor<float>> ex;
            if (is_perceptual(c.kind)) ex = load_matrix_extractor(m);
            run_cell(m, c, bundle, ex ? &*ex : nullptr, dir, log);
            return std::nullopt;
        } catch (const std::exception& e) {
            fs::create_directories(dir);
            std::ofstream(dir / "error.txt") << e.what() << "\n";
            if (log) log("[" + c.label() + "] FAILED: " + e.what());
            return std::string(e.what());
        }
    };

    if (jobs <= 1) {
        for (const CellSpec* c : todo) {
            if (auto err = execute(*c)) summary.failed.push_back(c->label() + ": " + *err);
            else ++summary.completed;
        }
        return summary;
    }

    std::map<pid_t, const CellSpec*> running;
    auto reap = [&] {
        int status = 0;
        const pid_t pid = ::wait(&status);
        if (pid <= 0) return;
        const CellSpec* c = running.at(pid);
        running.erase(pid);
        if (WIFEXITED(status) && WEXITSTATUS(status) == 0 && cell_complete(out, *c)) {
            ++summary.completed;
        } else {
            std::string err = "worker exited abnormally";
            std::ifstream e(cell_dir(out, *c) / "error.txt");
            if (e) std::getline(e, err);
            summary.failed.push_back(c->label() + ": " + err);
        }
    };
    for (const CellSpec* c : todo) {
        while (static_cast<int>(running.size()) >= jobs) reap();
        const pid_t pid = ::fork();
        if (pid < 0) throw std::runtime_error("fork failed");
        if (pid == 0) {
            const bool ok = !execute(*c);
            std::fflush(nullptr);
            ::_exit(ok ? 0 : 2);
        }
        running[pid] = c;
    }
    while (!running.empty()) reap();
    return summary;
}

// ---------------------------------------------------------------- reporting

struct StoredCell {
    nlohmann::json cell;
    std::vector<ExperimentRecord> records;
};

inline std::vector<StoredCell> load_records(const std::filesystem::path& out) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    if (fs::exists(out / "cells"))
        for (const auto& d : fs::directory_iterator(out / "cells"))
            if (fs::exists(d.path() / "record.json")) files.push_back(d.path() / "record.json");
    std::sort(files.begin(), files.end());
    std::vector<StoredCell> cells;
    for (const auto& f : files) {
        std::ifstream in(f);
        const auto j = nlohmann::json::parse(in);
        StoredCell c;
        c.cell = j.at("cell");
        for (const auto& r : j.at("records")) c.records.push_back(record_from_json(r));
        cells.push_back(std::move(c));
    }
    return cells;
}

/// SVG line plot of a metric against z (log2 axis), one series per model kind.
inline std::string metric_plot_svg(const std::string& title, const std::string& y_label,
                                   const std::map<std::string, std::map<int, double>>& series) {
    const double W = 520, H = 340, L = 70, R = 110, T = 40, B = 50;
    std::set<int> zs;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& [k, pts] : series)
        for (const auto& [z, v] : pts) {
            zs.insert(z);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (zs.empty()) throw std::invalid_argument("metric_plot_svg: no points");
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    const double zlo = std::log2(*zs.begin()), zhi = std::log2(*zs.rbegin());
    auto px = [&](int z) { return zhi == zlo ? L + (W - L - R) / 2 : L + (std::log2(z) - zlo) / (zhi - zlo) * (W - L - R); };
    auto py = [&](double v) { return T + (hi - v) / (hi - lo) * (H - T - B); };
    const std::map<std::string, std::string> colours = {
        {"AE", "#1f77b4"}, {"VAE", "#ff7f0e"}, {"P.AE", "#2ca02c"}, {"P.VAE", "#d62728"}};
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
       << title << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int z : zs)
        os << "<text x=\"" << px(z) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           << "font-size=\"11\">" << z << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
        const double v = lo + (hi - lo) * i / 4.0;
        os << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           << "font-size=\"11\">" << std::setprecision(3) << v << std::setprecision(2) << "</text>\n";
    }
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">z size</text>\n";
    os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
       << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << y_label << "</text>\n";
    int li = 0;
    for (const auto& [kind, pts] : series) {
        const std::string col = colours.count(kind) ? colours.at(kind) : "black";
        os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
        for (const auto& [z, v] : pts) os << px(z) << ',' << py(v) << ' ';
        os << "\"/>\n";
        for (const auto& [z, v] : pts)
            os << "<circle cx=\"" << px(z) << "\" cy=\"" << py(v) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
        const double ly = T + 10 + 18 * li++;
        os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly
           << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << W - R + 36 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"12\">"
           << kind << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

struct ReportSummary {
    std::vector<std::filesystem::path> files;
    std::vector<std::uint64_t> complete_seeds;
    std::vector<std::uint64_t> partial_seeds;
};

/// Regenerates every table, plot and summary under out/report from the stored
/// records alone. Output bytes depend only on the records.
inline ReportSummary report(const std::filesystem::path& out) {
    namespace fs = std::filesystem;
    const auto cells = load_records(out);
    if (cells.empty()) throw std::runtime_error("report: no completed cells under " + out.string());
    const fs::path dir = out / "report";
    ReportSummary rs;

    std::map<std::uint64_t, std::vector<ExperimentRecord>> by_seed;
    for (const auto& c : cells)
        for (const auto& r : c.records) by_seed[r.seeds.run].push_back(r);
    std::vector<std::string> notes;
    for (auto& [seed, recs] : by_seed) {
        std::sort(recs.begin(), recs.end(), [](const ExperimentRecord& a, const ExperimentRecord& b) {
            return std::tie(a.dataset, a.z_size, a.model_kind, a.predictor_kind) <
                   std::tie(b.dataset, b.z_size, b.model_kind, b.predictor_kind);
        });
        try {
            for (auto& f : emit_tables(recs, dir / ("seed_" + std::to_string(seed)))) rs.files.push_back(f);
            rs.complete_seeds.push_back(seed);
        } catch (const std::invalid_argument& e) {
            rs.partial_seeds.push_back(seed);
            notes.push_back("seed " + std::to_string(seed) + ": tables skipped (" + e.what() + ")");
        }
    }

    // Aggregate across seeds.
    struct Agg {
        std::vector<double> metric, recon;
    };
    std::map<std::tuple<std::string, int, std::string, std::string>, Agg> agg;
    for (const auto& [seed, recs] : by_seed)
        for (const auto& r : recs) {
            auto& a = agg[{r.dataset, r.z_size, to_string(r.model_kind), to_string(r.predictor_kind)}];
            a.metric.push_back(r.metric_value);
            a.recon.push_back(r.recon_l1);
        }
    auto mean_sd = [](const std::vector<double>& v) {
        double m = 0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return std::pair{m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
    };
    std::ostringstream csv, txt;
    csv << "dataset,z,model_kind,predictor_kind,seeds,metric_mean,metric_sd,metric_min,metric_max,recon_l1_mean\n";
    csv << std::setprecision(10);
    txt << "Summary across seeds (metric: positioning error in pixels, or accuracy)\n\n";
    txt << std::left << std::setw(8) << "dataset" << std::setw(6) << "z" << std::setw(7) << "kind" << std::setw(8)
        << "probe" << std::right << std::setw(6) << "seeds" << std::setw(12) << "mean" << std::setw(10) << "sd"
        << std::setw(12) << "recon L1" << '\n';
    std::map<std::pair<std::string, std::string>, std::map<std::string, std::map<int, double>>> plot_series;
    for (const auto& [key, a] : agg) {
        const auto& [ds, z, kind, probe] = key;
        const auto [m, sd] = mean_sd(a.metric);
        const auto [rm, rsd] = mean_sd(a.recon);
        (void)rsd;
        csv << ds << ',' << z << ',' << kind << ',' << probe << ',' << a.metric.size() << ',' << m << ',' << sd << ','
            << *std::min_element(a.metric.begin(), a.metric.end()) << ','
            << *std::max_element(a.metric.begin(), a.metric.end()) << ',' << rm << '\n';
        txt << std::left << std::setw(8) << ds << std::setw(6) << z << std::setw(7) << kind << std::setw(8) << probe
            << std::right << std::setw(6) << a.metric.size() << std::setw(12) << std::fixed << std::setprecision(4) << m
            << std::setw(10) << sd << std::setw(12) << rm << '\n';
        plot_series[{ds, probe}][kind][z] = m;
    }

    // Perceptual-loss timing overhead, pairing AE/P.AE and VAE/P.VAE runs of one (dataset, z, seed).
    std::map<std::tuple<std::string, int, std::uint64_t, std::string>, RunTimings> timing;
    for (const auto& [seed, recs] : by_seed)
        for (const auto& r : recs)
            if (r.predictor_kind == PredictorKind::mlp) timing[{r.dataset, r.z_size, seed, to_string(r.model_kind)}] = r.timings;
    std::ostringstream tcsv;
    tcsv << "dataset,z,seed,pair,epochs_compared,overhead_percent\n" << std::setprecision(6);
    txt << "\nPerceptual-loss training-time overhead (median seconds per epoch, common epochs)\n";
    std::vector<double> overheads;
    for (const auto& [key, t] : timing) {
        const auto& [ds, z, seed, kind] = key;
        if (kind != "P.AE" && kind != "P.VAE") continue;
        const std::string base = kind == "P.AE" ? "AE" : "VAE";
        auto it = timing.find({ds, z, seed, base});
        if (it == timing.end()) continue;
        const double o = measure_overhead_common(it->second, t);
        const std::size_t n = std::min(it->second.seconds_per_epoch.size(), t.seconds_per_epoch.size());
        overheads.push_back(o);
        tcsv << ds << ',' << z << ',' << seed << ',' << base << "->" << kind << ',' << n << ',' << o << '\n';
        txt << "  " << ds << " z=" << z << " seed=" << seed << " " << base << " -> " << kind << ": " << std::fixed
            << std::setprecision(1) << o << "% over " << n << " epochs\n";
    }
    if (!overheads.empty()) {
        const auto [m, sd] = mean_sd(overheads);
        txt << "  mean overhead: " << std::fixed << std::setprecision(1) << m << "% (sd " << sd << ", n "
            << overheads.size() << ")\n";
    } else {
        txt << "  no pixel-wise/perceptual pairs available\n";
    }
    if (!notes.empty()) {
        txt << "\nNotes\n";
        for (const auto& n : notes) txt << "  " << n << '\n';
    }
    write_text_file(dir / "summary.csv", csv.str());
    write_text_file(dir / "summary.txt", txt.str());
    write_text_file(dir / "timing_overhead.csv", tcsv.str());
    rs.files.push_back(dir / "summary.csv");
    rs.files.push_back(dir / "summary.txt");
    rs.files.push_back(dir / "timing_overhead.csv");

    for (const auto& [key, series] : plot_series) {
        const auto& [ds, probe] = key;
        const bool pos = ds == "lander";
        const fs::path f = dir / (ds + "_" + probe + ".svg");
        write_text_file(f, metric_plot_svg(ds + " (" + probe + " probe, mean over seeds)",
                                           pos ? "positioning error (px)" : "accuracy", series));
        rs.files.push_back(f);
    }

    // Reconstruction grids per dataset and seed: the cells' grids stacked in (z, kind) order.
    std::map<std::pair<std::string, std::uint64_t>, std::vector<std::pair<std::pair<int, int>, fs::path>>> grids;
    for (const auto& c : cells) {
        if (c.records.empty()) continue;
        const auto& r = c.records.front();
        const fs::path ppm = out / "cells" / sha256_hex(c.cell.dump()) / "recon.ppm";
        if (fs::exists(ppm))
            grids[{r.dataset, r.seeds.run}].push_back({{r.z_size, static_cast<int>(r.model_kind)}, ppm});
    }
    for (auto& [key, list] : grids) {
        std::sort(list.begin(), list.end());
        std::vector<Tensor<float>> images;
        for (const auto& [order, path] : list) images.push_back(read_ppm(path));
        const fs::path f = dir / ("recon_" + key.first + "_seed_" + std::to_string(key.second) + ".ppm");
        write_ppm(f, stack_vertical(images));
        rs.files.push_back(f);
    }
    return rs;
}

}  // namespace percept
