#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "percept/datasets.hpp"
#include "percept/formats.hpp"
#include "percept/rng.hpp"

namespace percept {

/// Parameters of the synthetic lander scenes: a terrain silhouette at the
/// bottom, a dark sky, and a small uniform-intensity sprite flown by a
/// random thrust policy.
struct SceneConfig {
    int rollouts = 1400;
    int frames = 150;       // simulated timesteps per rollout
    int frame_stride = 1;   // keep every n-th timestep
    int image_size = 64;
    int lander_width = 6;
    int lander_height = 5;
    double lander_intensity = 0.6;
    double terrain_intensity = 1.0;
    int terrain_points = 11;
    double terrain_top = 0.72;     // highest ground row, fraction of image height
    double terrain_bottom = 0.92;  // lowest ground row
    // Trajectory model, pixels and frames.
    double gravity = 0.05;
    double main_thrust = 0.11;
    double side_thrust = 0.04;
    double max_speed = 1.6;
    double start_spread = 0.22;    // start x ~ centre +- spread * size

    void validate() const {
        if (rollouts <= 0) throw std::invalid_argument("SceneConfig: rollouts must be positive");
        if (rollouts < 2) throw std::invalid_argument("SceneConfig: need at least two rollouts");
        if (frames <= 0) throw std::invalid_argument("SceneConfig: frames must be positive");
        if (frame_stride < 1 || frame_stride > frames)
            throw std::invalid_argument("SceneConfig: frame_stride must be in [1, frames]");
        if (image_size <= 0) throw std::invalid_argument("SceneConfig: image_size must be positive");
        if (lander_width <= 0 || lander_height <= 0) throw std::invalid_argument("SceneConfig: empty sprite");
        if (lander_width > image_size || lander_height > image_size)
            throw std::invalid_argument("SceneConfig: sprite larger than image");
        if (!(lander_intensity > 0.0 && lander_intensity < 1.0))
            throw std::invalid_argument("SceneConfig: lander_intensity must be in (0,1)");
        if (quantize(lander_intensity) == quantize(terrain_intensity))
            throw std::invalid_argument("SceneConfig: lander and terrain intensities must differ");
        if (terrain_points < 2) throw std::invalid_argument("SceneConfig: terrain needs two points");
        if (!(terrain_top <= terrain_bottom && terrain_bottom <= 1.0 && terrain_top > 0.0))
            throw std::invalid_argument("SceneConfig: bad terrain band");
    }

    static std::uint8_t quantize(double v) {
        return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
};

struct LanderFrame {
    int rollout = 0;
    int frame = 0;
    int left = 0;  // sprite's top-left pixel, may lie outside the image
    int top = 0;
    bool on_screen = false;

    Position label(const SceneConfig& c) const {
        return {left + c.lander_width / 2.0, top + c.lander_height / 2.0};
    }
};

/// All simulated rollouts; renders frames on demand.
class LanderWorld {
public:
    LanderWorld(SceneConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
        config_.validate();
        for (int r = 0; r < config_.rollouts; ++r) simulate(r);
    }

    const SceneConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }
    const std::vector<LanderFrame>& frames() const { return frames_; }
    const std::vector<std::uint8_t>& ground(int rollout) const { return ground_[rollout]; }

    /// Renders into bytes, channel-major then row-major.
    void render_bytes(const LanderFrame& f, std::span<std::uint8_t> out) const {
        const int s = config_.image_size;
        const std::uint8_t terrain = SceneConfig::quantize(config_.terrain_intensity);
        const std::uint8_t lander = SceneConfig::quantize(config_.lander_intensity);
        const auto& g = ground_[f.rollout];
        for (int c = 0; c < 3; ++c)
            for (int r = 0; r < s; ++r)
                for (int col = 0; col < s; ++col) {
                    std::uint8_t v = r >= g[col] ? terrain : 0;
                    if (r >= f.top && r < f.top + config_.lander_height && col >= f.left &&
                        col < f.left + config_.lander_width)
                        v = lander;
                    out[(static_cast<std::size_t>(c) * s + r) * s + col] = v;
                }
    }

    void render(const LanderFrame& f, std::span<float> out) const {
        std::vector<std::uint8_t> bytes(3ull * config_.image_size * config_.image_size);
        render_bytes(f, bytes);
        for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<float>(bytes[i]) / 255.0f;
    }

private:
    void simulate(int rollout) {
        const SceneConfig& c = config_;
        const int s = c.image_size;
        Rng rng(derive_seed(seed_, 0x7e44a1, rollout));

        // Terrain: piecewise-linear ground row per column with a flat pad in the middle.
        std::vector<double> pts(c.terrain_points);
        for (auto& p : pts) p = rng.uniform(c.terrain_top, c.terrain_bottom) * s;
        const int mid = c.terrain_points / 2;
        if (c.terrain_points >= 3) pts[mid - 1] = pts[mid] = pts[std::min(mid + 1, c.terrain_points - 1)];
        std::vector<std::uint8_t> g(s);
        for (int col = 0; col < s; ++col) {
            const double t = (col + 0.5) / s * (c.terrain_points - 1);
            const int i = std::min(static_cast<int>(t), c.terrain_points - 2);
            const double a = t - i;
            g[col] = static_cast<std::uint8_t>(std::clamp(std::lround((1 - a) * pts[i] + a * pts[i + 1]), 0L,
                                                          static_cast<long>(s)));
        }
        ground_.push_back(g);

        const double hw = c.lander_width / 2.0, hh = c.lander_height / 2.0;
        double x = s / 2.0 + rng.uniform(-c.start_spread, c.start_spread) * s;
        double y = hh + rng.uniform(0.0, 0.15) * s;
        double vx = rng.uniform(-0.5, 0.5), vy = rng.uniform(0.0, 0.4);
        auto ground_at = [&](double px) {
            const int col = std::clamp(static_cast<int>(std::floor(px)), 0, s - 1);
            return static_cast<double>(g[col]);
        };
        for (int f = 0; f < c.frames; ++f) {
            if (f % c.frame_stride == 0) {
                LanderFrame fr;
                fr.rollout = rollout;
                fr.frame = f;
                fr.left = static_cast<int>(std::lround(x - hw));
                fr.top = static_cast<int>(std::lround(y - hh));
                fr.on_screen =
                    fr.left >= 0 && fr.top >= 0 && fr.left + c.lander_width <= s && fr.top + c.lander_height <= s;
                frames_.push_back(fr);
            }

            // Random policy: noop, left engine, main engine, right engine.
            const auto action = rng.below(4);
            double ax = 0, ay = c.gravity;
            if (action == 1) ax = c.side_thrust;
            if (action == 2) ay -= c.main_thrust;
            if (action == 3) ax = -c.side_thrust;
            vx = std::clamp(vx + ax, -c.max_speed, c.max_speed);
            vy = std::clamp(vy + ay, -c.max_speed, c.max_speed);
            x += vx;
            y += vy;
            const double floor_y = ground_at(x) - hh;
            if (y > floor_y) {
                y = floor_y;
                vy = 0;
                vx *= 0.5;
            }
        }
    }

    SceneConfig config_;
    std::uint64_t seed_;
    std::vector<LanderFrame> frames_;
    std::vector<std::vector<std::uint8_t>> ground_;
};

/// View of selected frames of a world; grouped by rollout.
class LanderSource final : public SampleSource {
public:
    LanderSource(std::shared_ptr<const LanderWorld> world, std::vector<std::size_t> frame_ids)
        : world_(std::move(world)), ids_(std::move(frame_ids)) {}

    std::size_t size() const override { return ids_.size(); }
    int side() const override { return world_->config().image_size; }
    void read_image(std::size_t i, std::span<float> out) const override { world_->render(frame(i), out); }
    std::optional<Label> label(std::size_t i) const override { return frame(i).label(world_->config()); }
    std::int64_t group(std::size_t i) const override { return frame(i).rollout; }
    const LanderFrame& frame(std::size_t i) const { return world_->frames()[ids_[i]]; }

private:
    std::shared_ptr<const LanderWorld> world_;
    std::vector<std::size_t> ids_;
};

/// Rollout assignment: first half feeds the autoencoder; the second half is
/// shuffled by seed and divided 80/20 into predictor and test rollouts.
struct RolloutSplit {
    std::vector<int> autoencoder, predictor, test;
};

inline RolloutSplit split_rollouts(int rollouts, std::uint64_t seed) {
    RolloutSplit s;
    const int half = rollouts / 2;
    for (int r = 0; r < half; ++r) s.autoencoder.push_back(r);
    std::vector<int> rest;
    for (int r = half; r < rollouts; ++r) rest.push_back(r);
    Rng rng(derive_seed(seed, 0x5b1));
    rng.shuffle(rest);
    const auto n_pred = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(rest.size())));
    s.predictor.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_pred));
    s.test.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_pred), rest.end());
    std::sort(s.predictor.begin(), s.predictor.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

inline DatasetBundle bundle_from_world(std::shared_ptr<const LanderWorld> world) {
    const auto& cfg = world->config();
    const RolloutSplit split = split_rollouts(cfg.rollouts, world->seed());
    std::vector<int> role(cfg.rollouts, 0);  // 0 autoencoder, 1 predictor, 2 test
    for (int r : split.predictor) role[r] = 1;
    for (int r : split.test) role[r] = 2;
    std::vector<std::size_t> ae, pred, test;
    const auto& frames = world->frames();
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const int k = role[frames[i].rollout];
        if (k == 0) ae.push_back(i);
        else if (frames[i].on_screen) (k == 1 ? pred : test).push_back(i);
    }
    const std::uint64_t seed = world->seed();
    auto ae_src = std::make_shared<LanderSource>(world, std::move(ae));
    auto pred_src = std::make_shared<LanderSource>(world, std::move(pred));
    auto test_src = std::make_shared<LanderSource>(world, std::move(test));
    return DatasetBundle("lander", TaskKind::positioning, std::nullopt, make_part(ae_src, derive_seed(seed, 0xae)),
                         make_part(pred_src, derive_seed(seed, 0x9d)), test_src);
}

inline DatasetBundle generate_lander_collection(const SceneConfig& config, std::uint64_t seed) {
    return bundle_from_world(std::make_shared<const LanderWorld>(config, seed));
}

/// Fraction of second-half frames removed because the sprite was not fully visible.
inline double removed_fraction(const LanderWorld& world) {
    const int half = world.config().rollouts / 2;
    std::size_t total = 0, removed = 0;
    for (const auto& f : world.frames())
        if (f.rollout >= half) {
            ++total;
            removed += f.on_screen ? 0 : 1;
        }
    return total ? static_cast<double>(removed) / static_cast<double>(total) : 0.0;
}

// ------------------------------------------------------------ persistence
//
// Directory layout written by write_lander_collection:
//   manifest.txt          key = value lines (seed and every SceneConfig field)
//   rollout_NNNNN.u8      raw uint8 frames, [frames][3][S][S]
//   rollout_NNNNN.txt     one "frame_id x y" line per stored frame
// First-half rollouts store every frame; second-half rollouts store only
// frames whose sprite is fully on screen.

inline std::map<std::string, double> scene_fields(const SceneConfig& c) {
    return {{"rollouts", c.rollouts},
            {"frames", c.frames},
            {"frame_stride", c.frame_stride},
            {"image_size", c.image_size},
            {"lander_width", c.lander_width},
            {"lander_height", c.lander_height},
            {"lander_intensity", c.lander_intensity},
            {"terrain_intensity", c.terrain_intensity},
            {"terrain_points", c.terrain_points},
            {"terrain_top", c.terrain_top},
            {"terrain_bottom", c.terrain_bottom},
            {"gravity", c.gravity},
            {"main_thrust", c.main_thrust},
            {"side_thrust", c.side_thrust},
            {"max_speed", c.max_speed},
            {"start_spread", c.start_spread}};
}

/// Applies a known SceneConfig field; returns false for unknown keys.
inline bool set_scene_field(SceneConfig& c, const std::string& key, double v) {
    if (key == "rollouts") c.rollouts = static_cast<int>(v);
    else if (key == "frames") c.frames = static_cast<int>(v);
    else if (key == "frame_stride") c.frame_stride = static_cast<int>(v);
    else if (key == "image_size") c.image_size = static_cast<int>(v);
    else if (key == "lander_width") c.lander_width = static_cast<int>(v);
    else if (key == "lander_height") c.lander_height = static_cast<int>(v);
    else if (key == "lander_intensity") c.lander_intensity = v;
    else if (key == "terrain_intensity") c.terrain_intensity = v;
    else if (key == "terrain_points") c.terrain_points = static_cast<int>(v);
    else if (key == "terrain_top") c.terrain_top = v;
    else if (key == "terrain_bottom") c.terrain_bottom = v;
    else if (key == "gravity") c.gravity = v;
    else if (key == "main_thrust") c.main_thrust = v;
    else if (key == "side_thrust") c.side_thrust = v;
    else if (key == "max_speed") c.max_speed = v;
    else if (key == "start_spread") c.start_spread = v;
    else return false;
    return true;
}

inline std::string rollout_stem(int r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "rollout_%05d", r);
    return buf;
}

inline void write_lander_collection(const LanderWorld& world, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto& cfg = world.config();
    {
        std::ofstream m(dir / "manifest.txt");
        m.precision(17);
        m << "seed = " << world.seed() << "\n";
        for (const auto& [k, v] : scene_fields(cfg)) m << k << " = " << v << "\n";
        if (!m) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
    }
    const int half = cfg.rollouts / 2;
    const std::size_t rec = 3ull * cfg.image_size * cfg.image_size;
    std::vector<std::uint8_t> buf(rec);
    std::ofstream img, idx;
    int current = -1;
    for (const auto& f : world.frames()) {
        if (f.rollout != current) {
            current = f.rollout;
            img = std::ofstream(dir / (rollout_stem(current) + ".u8"), std::ios::binary | std::ios::trunc);
            idx = std::ofstream(dir / (rollout_stem(current) + ".txt"), std::ios::trunc);
        }
        if (f.rollout >= half && !f.on_screen) continue;
        world.render_bytes(f, buf);
        img.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(rec));
        const Position p = f.label(cfg);
        idx << f.frame << ' ' << p.x << ' ' << p.y << '\n';
    }
}

/// Reads a directory written by write_lander_collection back into a bundle
/// with the same splits.
inline DatasetBundle read_lander_collection(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::ifstream m(dir / "manifest.txt");
    if (!m) throw IngestError(dir / "manifest.txt", "missing manifest");
    SceneConfig cfg;
    std::uint64_t seed = 0;
    std::string line;
    while (std::getline(m, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        key.erase(key.find_last_not_of(" \t") + 1);
        if (key == "seed") seed = std::stoull(val);
        else set_scene_field(cfg, key, std::stod(val));
    }
    cfg.validate();
    const RolloutSplit split = split_rollouts(cfg.rollouts, seed);
    const std::size_t rec = 3ull * cfg.image_size * cfg.image_size;
    auto load = [&](const std::vector<int>& rollouts) {
        auto bytes = std::make_shared<std::vector<std::uint8_t>>();
        std::vector<Label> labels;
        std::vector<std::int64_t> groups;
        for (int r : rollouts) {
            const fs::path u8 = dir / (rollout_stem(r) + ".u8"), txt = dir / (rollout_stem(r) + ".txt");
            std::ifstream ii(u8, std::ios::binary), ti(txt);
            if (!ii) throw IngestError(u8, "missing rollout images");
            if (!ti) throw IngestError(txt, "missing rollout labels");
            std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(ii)), std::istreambuf_iterator<char>());
            if (data.size() % rec != 0) throw IngestError(u8, "size is not a whole number of frames");
            std::size_t n = 0;
            int frame;
            double x, y;
            while (ti >> frame >> x >> y) {
                labels.emplace_back(Position{x, y});
                groups.push_back(r);
                ++n;
            }
            if (n != data.size() / rec)
                throw IngestError(txt, std::to_string(n) + " labels for " + std::to_string(data.size() / rec) + " frames");
            bytes->insert(bytes->end(), data.begin(), data.end());
        }
        std::span<const std::uint8_t> view(bytes->data(), bytes->size());
        return std::make_shared<ByteImageSource>(bytes, view, cfg.image_size, ByteLayout::chw_row_major,
                                                 std::move(labels), std::move(groups));
    };
    return DatasetBundle("lander", TaskKind::positioning, std::nullopt,
                         make_part(load(split.autoencoder), derive_seed(seed, 0xae)),
                         make_part(load(split.predictor), derive_seed(seed, 0x9d)), load(split.test));
}

}  // namespace percept
