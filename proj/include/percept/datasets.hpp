#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "percept/rng.hpp"
#include "percept/tensor.hpp"

namespace percept {

/// One 3-channel square image with values in [0,1].
class ImageTensor {
public:
    explicit ImageTensor(Tensor<float> data) : data_(std::move(data)) {
        if (data_.rank() != 3 || data_.dim(0) != 3 || data_.dim(1) != data_.dim(2))
            throw std::invalid_argument("ImageTensor: expected [3,S,S], got " +
                                        Tensor<float>::shape_string(data_.shape()));
        for (float v : data_.vec())
            if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("ImageTensor: value outside [0,1]");
    }

    int side() const { return data_.dim(1); }
    const Tensor<float>& tensor() const { return data_; }
    float at(int c, int r, int col) const {
        return data_[(static_cast<std::size_t>(c) * side() + r) * side() + col];
    }

private:
    Tensor<float> data_;
};

/// Sprite-centre pixel coordinates; x is the column axis, y the row axis.
struct Position {
    double x = 0;
    double y = 0;
    friend bool operator==(const Position&, const Position&) = default;
};

using ClassId = int;
using Label = std::variant<Position, ClassId>;

struct LabeledSample {
    ImageTensor image;
    Label label;
};

enum class TaskKind { positioning, classification };

/// Immutable, random-access collection of images (and optional labels).
/// Implementations must be safe for concurrent reads.
class SampleSource {
public:
    virtual ~SampleSource() = default;
    virtual std::size_t size() const = 0;
    virtual int side() const = 0;
    /// Writes 3*side*side values in [0,1], channel-major then row-major.
    virtual void read_image(std::size_t i, std::span<float> out) const = 0;
    virtual std::optional<Label> label(std::size_t i) const = 0;
    /// Split granularity: samples sharing a group always land on the same side of a split.
    virtual std::int64_t group(std::size_t i) const { return static_cast<std::int64_t>(i); }

    ImageTensor image(std::size_t i) const {
        Tensor<float> t({3, side(), side()});
        read_image(i, t.span());
        return ImageTensor(std::move(t));
    }
};

/// A part of a dataset plus its deterministic 80/20 train/validation split
/// (indices into `source`).
struct DataPart {
    std::shared_ptr<const SampleSource> source;
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;

    std::size_t size() const { return source ? source->size() : 0; }
};

/// Reassembles a batch [N,3,S,S] from source indices.
inline Tensor<float> load_batch(const SampleSource& src, std::span<const std::size_t> indices) {
    const int s = src.side();
    Tensor<float> batch({static_cast<int>(indices.size()), 3, s, s});
    for (std::size_t b = 0; b < indices.size(); ++b) src.read_image(indices[b], batch.slice(static_cast<int>(b)));
    return batch;
}

/// Splits sample indices 80/20 at group granularity. Groups are shuffled by
/// `seed`; the first round(0.8 * groups) groups go to training.
inline void split_by_group(const SampleSource& src, std::uint64_t seed, std::vector<std::size_t>& train,
                           std::vector<std::size_t>& validation, double train_fraction = 0.8) {
    std::vector<std::int64_t> groups;
    for (std::size_t i = 0; i < src.size(); ++i) groups.push_back(src.group(i));
    std::vector<std::int64_t> uniq = groups;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    Rng rng(seed);
    rng.shuffle(uniq);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(uniq.size())));
    std::vector<std::int64_t> train_groups(uniq.begin(), uniq.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::sort(train_groups.begin(), train_groups.end());
    train.clear();
    validation.clear();
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (std::binary_search(train_groups.begin(), train_groups.end(), groups[i])) train.push_back(i);
        else validation.push_back(i);
    }
}

inline DataPart make_part(std::shared_ptr<const SampleSource> src, std::uint64_t seed) {
    DataPart p;
    p.source = std::move(src);
    split_by_group(*p.source, seed, p.train, p.validation);
    return p;
}

/// Read-only view of selected rows of another source.
class SubsetSource final : public SampleSource {
public:
    SubsetSource(std::shared_ptr<const SampleSource> base, std::vector<std::size_t> rows)
        : base_(std::move(base)), rows_(std::move(rows)) {
        for (std::size_t r : rows_)
            if (r >= base_->size()) throw std::out_of_range("SubsetSource: row out of range");
    }

    std::size_t size() const override { return rows_.size(); }
    int side() const override { return base_->side(); }
    void read_image(std::size_t i, std::span<float> out) const override { base_->read_image(rows_.at(i), out); }
    std::optional<Label> label(std::size_t i) const override { return base_->label(rows_.at(i)); }
    std::int64_t group(std::size_t i) const override { return base_->group(rows_.at(i)); }

private:
    std::shared_ptr<const SampleSource> base_;
    std::vector<std::size_t> rows_;
};

/// A seeded random subset of at most `limit` samples (whole groups are not
/// kept together; use for sample-granular datasets). Order is preserved.
inline std::shared_ptr<const SampleSource> limit_source(std::shared_ptr<const SampleSource> src, std::size_t limit,
                                                         std::uint64_t seed) {
    if (limit == 0 || limit >= src->size()) return src;
    std::vector<std::size_t> rows(src->size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    Rng rng(seed);
    rng.shuffle(rows);
    rows.resize(limit);
    std::sort(rows.begin(), rows.end());
    return std::make_shared<SubsetSource>(std::move(src), std::move(rows));
}

class DatasetBundle;

/// Capability token for reading a bundle's test part. Only the evaluation
/// stage (and test code) can mint one.
class TestAccess {
    TestAccess() = default;
    friend struct TestSetGate;
};

class DatasetBundle {
public:
    DatasetBundle(std::string name, TaskKind task, std::optional<int> num_classes, DataPart autoencoder,
                  DataPart predictor, std::shared_ptr<const SampleSource> test)
        : name_(std::move(name)), task_(task), num_classes_(num_classes), autoencoder_(std::move(autoencoder)),
          predictor_(std::move(predictor)), test_(std::move(test)) {}

    const std::string& name() const { return name_; }
    TaskKind task() const { return task_; }
    std::optional<int> num_classes() const { return num_classes_; }
    int side() const { return autoencoder_.source->side(); }

    const DataPart& autoencoder_part() const { return autoencoder_; }
    const DataPart& predictor_part() const { return predictor_; }
    std::size_t test_size() const { return test_->size(); }
    const SampleSource& test_part(const TestAccess&) const { return *test_; }

private:
    std::string name_;
    TaskKind task_;
    std::optional<int> num_classes_;
    DataPart autoencoder_;
    DataPart predictor_;
    std::shared_ptr<const SampleSource> test_;
};

/// Tiles a 3x32x32 image into a 2x2 grid of copies (3x64x64).
inline ImageTensor svhn_tile(const ImageTensor& image) {
    if (image.side() != 32)
        throw std::invalid_argument("svhn_tile: expected a 3x32x32 image, got side " + std::to_string(image.side()));
    Tensor<float> out({3, 64, 64});
    for (int c = 0; c < 3; ++c)
        for (int r = 0; r < 64; ++r)
            for (int col = 0; col < 64; ++col)
                out[(static_cast<std::size_t>(c) * 64 + r) * 64 + col] = image.at(c, r % 32, col % 32);
    return ImageTensor(std::move(out));
}

inline std::filesystem::path default_data_root() {
    if (const char* env = std::getenv("PERCEPT_EMBED_DATA"); env != nullptr && *env != '\0') return env;
    return "data";
}

}  // namespace percept
