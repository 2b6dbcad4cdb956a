#include "derfkit/dataset.hpp"

#include "derfkit/errors.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

namespace derfkit {

using nlohmann::json;

std::string to_string(DatasetKind k) {
    return k == DatasetKind::cluster_tokens ? "cluster_tokens" : "parity_seq";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
    if (s == "cluster_tokens") return DatasetKind::cluster_tokens;
    if (s == "parity_seq") return DatasetKind::parity_seq;
    throw ConfigError("unknown dataset kind '" + s +
                      "' (expected cluster_tokens or parity_seq)");
}

void DatasetSpec::validate() const {
    std::vector<std::string> bad;
    if (n < 2) bad.push_back("n must be >= 2");
    if (seq_len < 1) bad.push_back("seq_len must be >= 1");
    if (c_in < 1) bad.push_back("c_in must be >= 1");
    if (n_classes < 2) bad.push_back("n_classes must be >= 2");
    if (kind == DatasetKind::cluster_tokens) {
        if (n_classes > c_in) {
            bad.push_back("cluster_tokens places class centers on distinct feature axes, so "
                          "n_classes (" + std::to_string(n_classes) + ") must be <= c_in (" +
                          std::to_string(c_in) + ")");
        }
        if (!(margin > 0.0)) bad.push_back("margin must be positive");
    } else {
        if (n_classes != 2) bad.push_back("parity_seq is a two-class task");
        if (parity_bits < 1 || parity_bits > seq_len) {
            bad.push_back("parity_bits must lie in [1, seq_len]");
        }
    }
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
        bad.push_back("val_fraction must lie in [0, 1)");
    }
    if (!bad.empty()) {
        std::string msg = "invalid dataset spec: " + bad[0];
        for (std::size_t i = 1; i < bad.size(); ++i) msg += "; " + bad[i];
        throw ConfigError(msg);
    }
}

json dataset_spec_to_json(const DatasetSpec& spec) {
    return json{
        {"kind", to_string(spec.kind)},
        {"n", spec.n},
        {"seq_len", spec.seq_len},
        {"c_in", spec.c_in},
        {"n_classes", spec.n_classes},
        {"margin", spec.margin},
        {"parity_bits", spec.parity_bits},
        {"seed", spec.seed},
        {"val_fraction", spec.val_fraction},
    };
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& ctx) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + ctx);
    }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& ctx) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(ctx + "." + key + ": wrong type");
    }
}

} // namespace

DatasetSpec dataset_spec_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("dataset spec must be a JSON object");
    check_keys(j,
               {"kind", "n", "seq_len", "c_in", "n_classes", "margin", "parity_bits", "seed",
                "val_fraction"},
               "dataset");
    DatasetSpec spec;
    std::string kind = to_string(spec.kind);
    read_field(j, "kind", kind, "dataset");
    spec.kind = dataset_kind_from_string(kind);
    read_field(j, "n", spec.n, "dataset");
    read_field(j, "seq_len", spec.seq_len, "dataset");
    read_field(j, "c_in", spec.c_in, "dataset");
    read_field(j, "n_classes", spec.n_classes, "dataset");
    read_field(j, "margin", spec.margin, "dataset");
    read_field(j, "parity_bits", spec.parity_bits, "dataset");
    read_field(j, "seed", spec.seed, "dataset");
    read_field(j, "val_fraction", spec.val_fraction, "dataset");
    return spec;
}

std::size_t Dataset::train_count() const {
    const auto n_val = static_cast<std::size_t>(
        std::floor(static_cast<double>(size()) * spec.val_fraction));
    return size() - n_val;
}

ToyBatch Dataset::slice(std::size_t first, std::size_t count) const {
    if (first + count > size()) {
        throw ShapeError("dataset slice [" + std::to_string(first) + ", " +
                         std::to_string(first + count) + ") out of range for " +
                         std::to_string(size()) + " rows");
    }
    const std::size_t row = spec.seq_len * spec.c_in;
    ToyBatch batch;
    batch.inputs = Tensor({count, spec.seq_len, spec.c_in});
    std::copy(inputs.data() + first * row, inputs.data() + (first + count) * row,
              batch.inputs.data());
    batch.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(first),
                        labels.begin() + static_cast<std::ptrdiff_t>(first + count));
    return batch;
}

ToyBatch Dataset::gather(const std::vector<std::size_t>& rows) const {
    const std::size_t row = spec.seq_len * spec.c_in;
    ToyBatch batch;
    batch.inputs = Tensor({rows.size(), spec.seq_len, spec.c_in});
    batch.labels.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= size()) {
            throw ShapeError("dataset row " + std::to_string(rows[i]) + " out of range");
        }
        std::copy(inputs.data() + rows[i] * row, inputs.data() + (rows[i] + 1) * row,
                  batch.inputs.data() + i * row);
        batch.labels[i] = labels[rows[i]];
    }
    return batch;
}

Dataset make_synthetic_dataset(const DatasetSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    Dataset ds;
    ds.spec = spec;
    ds.inputs = Tensor({spec.n, spec.seq_len, spec.c_in});
    ds.labels.resize(spec.n);

    // Round-robin then shuffle: class counts stay within 1 of each other.
    for (std::size_t i = 0; i < spec.n; ++i) {
        ds.labels[i] = static_cast<std::int64_t>(i % spec.n_classes);
    }
    rng.shuffle(ds.labels);

    const std::size_t row = spec.seq_len * spec.c_in;
    if (spec.kind == DatasetKind::cluster_tokens) {
        // Tokens are center_k + unit noise, so the mean embedding has
        // per-coordinate sigma 1/sqrt(T). Centers sit on orthogonal feature
        // axes at radius sqrt(2)*margin*sigma, which puts every class
        // boundary `margin` mean-embedding sigmas from each center.
        const double sigma_mean = 1.0 / std::sqrt(static_cast<double>(spec.seq_len));
        const double radius = std::sqrt(2.0) * spec.margin * sigma_mean;
        for (std::size_t i = 0; i < spec.n; ++i) {
            const auto axis = static_cast<std::size_t>(ds.labels[i]);
            double* out = ds.inputs.data() + i * row;
            for (std::size_t t = 0; t < spec.seq_len; ++t) {
                for (std::size_t c = 0; c < spec.c_in; ++c) {
                    *out++ = (c == axis ? radius : 0.0) + rng.normal();
                }
            }
        }
    } else {
        // Label = parity of negative feature-0 entries over the first
        // parity_bits positions; tokens are resampled until the parity
        // matches the assigned label, keeping classes exactly balanced.
        for (std::size_t i = 0; i < spec.n; ++i) {
            double* out = ds.inputs.data() + i * row;
            for (;;) {
                for (std::size_t j = 0; j < row; ++j) out[j] = rng.normal();
                std::size_t neg = 0;
                for (std::size_t t = 0; t < spec.parity_bits; ++t) {
                    if (out[t * spec.c_in] < 0.0) ++neg;
                }
                if (static_cast<std::int64_t>(neg % 2) == ds.labels[i]) break;
            }
        }
    }
    return ds;
}

namespace {

void write_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64_le(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

} // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
    json header = dataset_spec_to_json(ds.spec);
    header["shapes"] = {
        {"inputs", {ds.spec.n, ds.spec.seq_len, ds.spec.c_in}},
        {"labels", {ds.spec.n}},
    };
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open dataset file for writing: " + path);
    out.write("DFK1", 4);
    write_u64_le(out, header_str.size());
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    out.write(reinterpret_cast<const char*>(ds.inputs.data()),
              static_cast<std::streamsize>(ds.inputs.numel() * sizeof(double)));
    for (std::int64_t label : ds.labels) {
        auto u = static_cast<std::uint64_t>(label);
        write_u64_le(out, u);
    }
    if (!out) throw IoError("failed writing dataset: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "DFK1") {
        throw IoError("not a dataset file (bad magic): " + path);
    }
    const std::uint64_t header_len = read_u64_le(in);
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw IoError("truncated dataset header: " + path);
    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw IoError("corrupt dataset header in " + path + ": " + e.what());
    }
    json spec_json = header;
    spec_json.erase("shapes");

    Dataset ds;
    ds.spec = dataset_spec_from_json(spec_json);
    ds.inputs = Tensor({ds.spec.n, ds.spec.seq_len, ds.spec.c_in});
    ds.labels.resize(ds.spec.n);
    in.read(reinterpret_cast<char*>(ds.inputs.data()),
            static_cast<std::streamsize>(ds.inputs.numel() * sizeof(double)));
    for (auto& label : ds.labels) {
        label = static_cast<std::int64_t>(read_u64_le(in));
    }
    if (!in) throw IoError("truncated dataset blob: " + path);
    return ds;
}

} // namespace derfkit
