#pragma once

#include "derfkit/model.hpp"
#include "derfkit/rng.hpp"
#include "derfkit/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace derfkit {

enum class DatasetKind { cluster_tokens, parity_seq };
std::string to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);

struct DatasetSpec {
    DatasetKind kind = DatasetKind::cluster_tokens;
    std::size_t n = 2048;
    std::size_t seq_len = 16;
    std::size_t c_in = 8;
    std::size_t n_classes = 2;
    double margin = 3.0;          // cluster_tokens: class separation in mean-embedding sigmas
    std::size_t parity_bits = 3;  // parity_seq: number of marked positions
    std::uint64_t seed = 0;
    double val_fraction = 0.25;

    void validate() const;
};

nlohmann::json dataset_spec_to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

// Token sequences with labels, already shuffled; the validation split is the
// tail `floor(n * val_fraction)` rows.
struct Dataset {
    DatasetSpec spec;
    Tensor inputs;                     // [n, seq_len, c_in]
    std::vector<std::int64_t> labels;  // [n]

    std::size_t size() const { return labels.size(); }
    std::size_t train_count() const;
    std::size_t val_count() const { return size() - train_count(); }

    // Rows [first, first+count) of the whole set.
    ToyBatch slice(std::size_t first, std::size_t count) const;
    ToyBatch gather(const std::vector<std::size_t>& rows) const;
    ToyBatch val_batch() const { return slice(train_count(), val_count()); }
};

Dataset make_synthetic_dataset(const DatasetSpec& spec);

// File layout: "DFK1" magic, little-endian u64 JSON header length, header
// JSON (kind, n, shapes, generation parameters, seed), then the row-major
// little-endian f64 inputs followed by i64 labels.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

} // namespace derfkit
