#pragma once

// Synthetic voxel datasets and the two on-disk formats.
//
// Grid file (.vox): "VOX3" magic, u8 version (1), u8 payload tag
// (0 = bit-packed occupancy LSB-first in scan order, 1 = float32), u16
// little-endian cube resolution, then the payload.
//
// Checkpoint file (.vwt): "VWT1" magic, u8 version (1), length-prefixed
// architecture and flavor strings, u32 tensor count, then per tensor a
// length-prefixed name, u8 rank, u64 extents and little-endian float32 or
// float64 data. Loading matches tensors to the model by name and converts
// between the two float widths.
//
// Readers are total functions over arbitrary bytes: any malformed input maps
// to an IoError with a machine-checkable kind, never to a crash.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "volt3d/netgraph.hpp"
#include "volt3d/rng.hpp"
#include "volt3d/tensor.hpp"

namespace volt3d {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class IoErrorKind {
    file_missing,
    bad_magic,
    bad_header,
    truncated,
    bad_value,
    config_mismatch,
    missing_tensor,
    extra_tensor,
    shape_mismatch,
};

class IoError : public std::runtime_error {
public:
    IoError(IoErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}
    IoErrorKind kind() const { return kind_; }

private:
    IoErrorKind kind_;
};

// ---------------------------------------------------------------------------
// Solid families
// ---------------------------------------------------------------------------

// The thirteen generated categories. Each is an implicit solid over the cube
// [-1,1]^3 with jittered size/position parameters.
inline constexpr std::size_t kNumCategories = 13;

inline const char* category_name(std::size_t category) {
    static const char* names[kNumCategories] = {
        "sphere", "ellipsoid", "cube",  "slab",       "cylinder", "cone",  "pyramid",
        "torus",  "shell",     "cross", "octahedron", "lshape",   "frame",
    };
    if (category >= kNumCategories) throw std::invalid_argument("category out of range");
    return names[category];
}

namespace solids {

// Rasterize predicate(x,y,z) over voxel centers mapped into [-1,1]^3.
template <typename Pred>
Tensor<float> rasterize(std::size_t resolution, Pred&& inside) {
    Tensor<float> grid({resolution, resolution, resolution});
    const double step = 2.0 / static_cast<double>(resolution);
    for (std::size_t z = 0; z < resolution; ++z) {
        const double zc = -1.0 + (static_cast<double>(z) + 0.5) * step;
        for (std::size_t y = 0; y < resolution; ++y) {
            const double yc = -1.0 + (static_cast<double>(y) + 0.5) * step;
            for (std::size_t x = 0; x < resolution; ++x) {
                const double xc = -1.0 + (static_cast<double>(x) + 0.5) * step;
                grid(z, y, x) = inside(xc, yc, zc) ? 1.0f : 0.0f;
            }
        }
    }
    return grid;
}

inline Tensor<float> sphere(std::size_t res, double cx, double cy, double cz, double r) {
    return rasterize(res, [=](double x, double y, double z) {
        const double dx = x - cx, dy = y - cy, dz = z - cz;
        return dx * dx + dy * dy + dz * dz <= r * r;
    });
}

inline Tensor<float> ellipsoid(std::size_t res, double rx, double ry, double rz) {
    return rasterize(res, [=](double x, double y, double z) {
        const double a = x / rx, b = y / ry, c = z / rz;
        return a * a + b * b + c * c <= 1.0;
    });
}

inline Tensor<float> box(std::size_t res, double hx, double hy, double hz) {
    return rasterize(res, [=](double x, double y, double z) {
        return std::abs(x) <= hx && std::abs(y) <= hy && std::abs(z) <= hz;
    });
}

inline Tensor<float> cylinder(std::size_t res, double r, double hh) {
    return rasterize(res, [=](double x, double y, double z) {
        return x * x + y * y <= r * r && std::abs(z) <= hh;
    });
}

inline Tensor<float> cone(std::size_t res, double r, double hh) {
    // Apex up: radius shrinks linearly from r at z=-hh to 0 at z=+hh.
    return rasterize(res, [=](double x, double y, double z) {
        if (std::abs(z) > hh) return false;
        const double frac = (hh - z) / (2.0 * hh);
        const double rz = r * frac;
        return x * x + y * y <= rz * rz;
    });
}

inline Tensor<float> pyramid(std::size_t res, double half_base, double hh) {
    return rasterize(res, [=](double x, double y, double z) {
        if (std::abs(z) > hh) return false;
        const double frac = (hh - z) / (2.0 * hh);
        const double h = half_base * frac;
        return std::abs(x) <= h && std::abs(y) <= h;
    });
}

inline Tensor<float> torus(std::size_t res, double ring_r, double tube_r) {
    return rasterize(res, [=](double x, double y, double z) {
        const double q = std::sqrt(x * x + y * y) - ring_r;
        return q * q + z * z <= tube_r * tube_r;
    });
}

inline Tensor<float> shell(std::size_t res, double outer_r, double inner_r) {
    return rasterize(res, [=](double x, double y, double z) {
        const double d2 = x * x + y * y + z * z;
        return d2 <= outer_r * outer_r && d2 >= inner_r * inner_r;
    });
}

inline Tensor<float> cross3(std::size_t res, double arm_half_width, double arm_len) {
    return rasterize(res, [=](double x, double y, double z) {
        const bool bar_x = std::abs(y) <= arm_half_width && std::abs(z) <= arm_half_width &&
                           std::abs(x) <= arm_len;
        const bool bar_y = std::abs(x) <= arm_half_width && std::abs(z) <= arm_half_width &&
                           std::abs(y) <= arm_len;
        const bool bar_z = std::abs(x) <= arm_half_width && std::abs(y) <= arm_half_width &&
                           std::abs(z) <= arm_len;
        return bar_x || bar_y || bar_z;
    });
}

inline Tensor<float> octahedron(std::size_t res, double r) {
    return rasterize(res, [=](double x, double y, double z) {
        return std::abs(x) + std::abs(y) + std::abs(z) <= r;
    });
}

inline Tensor<float> lshape(std::size_t res, double half_width, double len) {
    return rasterize(res, [=](double x, double y, double z) {
        const bool bar_z = std::abs(x + len / 2) <= half_width && std::abs(y) <= half_width &&
                           z >= -len && z <= len;
        const bool bar_x = std::abs(z - len + half_width) <= half_width &&
                           std::abs(y) <= half_width && x >= -len && x <= len / 2;
        return bar_z || bar_x;
    });
}

inline Tensor<float> frame(std::size_t res, double half, double bar) {
    // Cube wireframe: points near at least two of the three face planes.
    return rasterize(res, [=](double x, double y, double z) {
        if (std::abs(x) > half || std::abs(y) > half || std::abs(z) > half) return false;
        int near_edges = 0;
        if (half - std::abs(x) <= bar) ++near_edges;
        if (half - std::abs(y) <= bar) ++near_edges;
        if (half - std::abs(z) <= bar) ++near_edges;
        return near_edges >= 2;
    });
}

inline Tensor<float> slab(std::size_t res, double hx, double hy, double hz) {
    return box(res, hx, hy, hz);
}

}  // namespace solids

// One jittered sample of the given category. The jitter stream depends only
// on the seed, so a (category, seed) pair names one exact grid.
inline Tensor<float> make_solid(std::size_t category, std::size_t resolution, Seed seed) {
    if (category >= kNumCategories) throw std::invalid_argument("category out of range");
    Rng rng(seed);
    auto in = [&](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };
    switch (category) {
        case 0: return solids::sphere(resolution, in(-0.1, 0.1), in(-0.1, 0.1), in(-0.1, 0.1),
                                      in(0.55, 0.8));
        case 1: return solids::ellipsoid(resolution, in(0.7, 0.9), in(0.35, 0.5), in(0.55, 0.7));
        case 2: { const double h = in(0.5, 0.7); return solids::box(resolution, h, h, h); }
        case 3: return solids::slab(resolution, in(0.7, 0.9), in(0.7, 0.9), in(0.12, 0.22));
        case 4: return solids::cylinder(resolution, in(0.4, 0.55), in(0.65, 0.85));
        case 5: return solids::cone(resolution, in(0.55, 0.75), in(0.65, 0.85));
        case 6: return solids::pyramid(resolution, in(0.55, 0.75), in(0.65, 0.85));
        case 7: return solids::torus(resolution, in(0.5, 0.65), in(0.18, 0.28));
        case 8: return solids::shell(resolution, in(0.7, 0.85), in(0.45, 0.55));
        case 9: return solids::cross3(resolution, in(0.15, 0.25), in(0.75, 0.95));
        case 10: return solids::octahedron(resolution, in(0.75, 0.95));
        case 11: return solids::lshape(resolution, in(0.16, 0.24), in(0.6, 0.8));
        case 12: return solids::frame(resolution, in(0.65, 0.85), in(0.18, 0.28));
    }
    throw std::logic_error("unreachable");
}

inline double occupancy_fraction(const Tensor<float>& grid) {
    double filled = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) filled += grid.at_flat(i) > 0.5f ? 1.0 : 0.0;
    return filled / static_cast<double>(grid.size());
}

// ---------------------------------------------------------------------------
// Latent encoding (stand-in for the image encoder)
// ---------------------------------------------------------------------------

inline constexpr std::size_t kLatentDim = 2048;
inline constexpr std::size_t kEncoderPooledSide = 8;
// Noise stream for sample i draws from subseed(dataset_seed, offset + i).
inline constexpr std::uint64_t kNoiseSeedOffset = 0x4015e;

// Deterministic encoder: average-pool the grid to 8^3, then apply a fixed
// random projection to 2048 features, plus optional per-sample noise. The
// projection matrix is a pure function of the dataset seed.
class LatentEncoder {
public:
    explicit LatentEncoder(Seed dataset_seed)
        : projection_(Tensor<float>::randn(
              {kLatentDim, kEncoderPooledSide * kEncoderPooledSide * kEncoderPooledSide},
              subseed(dataset_seed, 0x1a7e),
              1.0 / std::sqrt(static_cast<double>(kEncoderPooledSide * kEncoderPooledSide *
                                                  kEncoderPooledSide)))) {}

    Tensor<float> encode(const Tensor<float>& grid, Seed noise_seed, double noise_std) const {
        const auto pooled = pool(grid);
        Tensor<float> latent({kLatentDim});
        const std::size_t in = pooled.size();
        for (std::size_t j = 0; j < kLatentDim; ++j) {
            double acc = 0;
            for (std::size_t i = 0; i < in; ++i) {
                acc += static_cast<double>(projection_.data()[j * in + i]) *
                       static_cast<double>(pooled.at_flat(i));
            }
            latent.data()[j] = static_cast<float>(acc);
        }
        if (noise_std > 0) {
            Rng rng(noise_seed);
            for (std::size_t j = 0; j < kLatentDim; ++j) {
                latent.data()[j] += static_cast<float>(noise_std * rng.normal());
            }
        }
        return latent;
    }

private:
    static Tensor<float> pool(const Tensor<float>& grid) {
        const std::size_t res = grid.extent(0);
        const std::size_t side = kEncoderPooledSide;
        if (res % side != 0) {
            throw std::invalid_argument("latent encoder needs a resolution divisible by " +
                                        std::to_string(side));
        }
        const std::size_t f = res / side;
        Tensor<float> out({side, side, side});
        for (std::size_t z = 0; z < side; ++z)
            for (std::size_t y = 0; y < side; ++y)
                for (std::size_t x = 0; x < side; ++x) {
                    double acc = 0;
                    for (std::size_t a = 0; a < f; ++a)
                        for (std::size_t b = 0; b < f; ++b)
                            for (std::size_t c = 0; c < f; ++c) {
                                acc += grid(z * f + a, y * f + b, x * f + c);
                            }
                    out(z, y, x) = static_cast<float>(acc / static_cast<double>(f * f * f));
                }
        return out;
    }

    Tensor<float> projection_;
};

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

struct ClassificationSample {
    Tensor<float> grid;  // (resolution^3)
    int label = 0;
};

struct ReconstructionSample {
    Tensor<float> latent;  // (2048)
    Tensor<float> grid;    // target occupancy
};

// Balanced labels in round-robin order; sample i is fully determined by
// (seed, i) regardless of how many samples are drawn.
inline std::vector<ClassificationSample> make_classification_dataset(std::size_t count,
                                                                     std::size_t resolution,
                                                                     Seed seed) {
    std::vector<ClassificationSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t category = i % kNumCategories;
        out.push_back({make_solid(category, resolution, subseed(seed, i)),
                       static_cast<int>(category)});
    }
    return out;
}

inline std::vector<ReconstructionSample> make_reconstruction_dataset(std::size_t count,
                                                                     std::size_t resolution,
                                                                     Seed seed,
                                                                     double noise_std = 0.01) {
    const LatentEncoder encoder(seed);
    std::vector<ReconstructionSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t category = i % kNumCategories;
        auto grid = make_solid(category, resolution, subseed(seed, i));
        auto latent = encoder.encode(grid, subseed(seed, kNoiseSeedOffset + i), noise_std);
        out.push_back({std::move(latent), std::move(grid)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Binary helpers
// ---------------------------------------------------------------------------

namespace detail {

class ByteReader {
public:
    ByteReader(std::string bytes, std::string what)
        : bytes_(std::move(bytes)), what_(std::move(what)) {}

    void read(void* dst, std::size_t n) {
        if (pos_ + n > bytes_.size()) {
            throw IoError(IoErrorKind::truncated,
                          what_ + ": truncated, wanted " + std::to_string(n) + " bytes at offset " +
                              std::to_string(pos_));
        }
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }

    template <typename V>
    V scalar() {
        V v;
        read(&v, sizeof(V));
        return v;
    }

    std::string string(std::size_t n) {
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }

    bool exhausted() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrorKind::file_missing, "cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

template <typename V>
void put(std::ofstream& out, V v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Grid files
// ---------------------------------------------------------------------------

inline void write_vox3(const std::string& path, const Tensor<float>& grid, bool packed = true) {
    if (grid.rank() != 3 || grid.extent(0) != grid.extent(1) || grid.extent(1) != grid.extent(2)) {
        throw std::invalid_argument("write_vox3: grid must be a cube");
    }
    const std::size_t res = grid.extent(0);
    if (res > 0xffff) throw std::invalid_argument("write_vox3: resolution exceeds u16");
    if (packed) {
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const float v = grid.at_flat(i);
            if (v != 0.0f && v != 1.0f) {
                throw std::invalid_argument(
                    "write_vox3: packed payload requires binary occupancy");
            }
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::file_missing, "cannot create '" + path + "'");
    out.write("VOX3", 4);
    detail::put<std::uint8_t>(out, 1);                            // version
    detail::put<std::uint8_t>(out, packed ? 0 : 1);               // payload tag
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(res));
    if (packed) {
        std::uint8_t byte = 0;
        int bits = 0;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            if (grid.at_flat(i) == 1.0f) byte |= static_cast<std::uint8_t>(1u << bits);
            if (++bits == 8) {
                detail::put(out, byte);
                byte = 0;
                bits = 0;
            }
        }
        if (bits != 0) detail::put(out, byte);
    } else {
        out.write(reinterpret_cast<const char*>(grid.data()),
                  static_cast<std::streamsize>(grid.size() * sizeof(float)));
    }
    if (!out) throw IoError(IoErrorKind::bad_value, "short write to '" + path + "'");
}

inline Tensor<float> read_vox3(const std::string& path) {
    detail::ByteReader reader(detail::slurp(path), "vox3 '" + path + "'");
    char magic[4];
    reader.read(magic, 4);
    if (std::memcmp(magic, "VOX3", 4) != 0) {
        throw IoError(IoErrorKind::bad_magic, "'" + path + "' is not a VOX3 file");
    }
    const auto version = reader.scalar<std::uint8_t>();
    if (version != 1) {
        throw IoError(IoErrorKind::bad_header,
                      "'" + path + "': unsupported version " + std::to_string(version));
    }
    const auto tag = reader.scalar<std::uint8_t>();
    if (tag > 1) {
        throw IoError(IoErrorKind::bad_header,
                      "'" + path + "': unknown payload tag " + std::to_string(tag));
    }
    const std::size_t res = reader.scalar<std::uint16_t>();
    if (res == 0) throw IoError(IoErrorKind::bad_header, "'" + path + "': zero resolution");
    const std::size_t n = res * res * res;

    Tensor<float> grid({res, res, res});
    if (tag == 0) {
        const std::size_t payload = (n + 7) / 8;
        if (reader.remaining() != payload) {
            throw IoError(IoErrorKind::truncated,
                          "'" + path + "': packed payload is " + std::to_string(reader.remaining()) +
                              " bytes, expected " + std::to_string(payload));
        }
        std::uint8_t byte = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (i % 8 == 0) byte = reader.scalar<std::uint8_t>();
            grid.at_flat(i) = (byte >> (i % 8)) & 1u ? 1.0f : 0.0f;
        }
    } else {
        if (reader.remaining() != n * sizeof(float)) {
            throw IoError(IoErrorKind::truncated,
                          "'" + path + "': float payload is " + std::to_string(reader.remaining()) +
                              " bytes, expected " + std::to_string(n * sizeof(float)));
        }
        reader.read(grid.data(), n * sizeof(float));
        for (std::size_t i = 0; i < n; ++i) {
            if (!std::isfinite(grid.at_flat(i))) {
                throw IoError(IoErrorKind::bad_value, "'" + path + "': non-finite voxel value");
            }
        }
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

template <typename T>
void write_checkpoint(const std::string& path, const std::string& arch, ConvFlavor flavor,
                      const std::vector<ParamRef<T>>& params) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::file_missing, "cannot create '" + path + "'");
    out.write("VWT1", 4);
    detail::put<std::uint8_t>(out, 1);
    const std::string flav = flavor_name(flavor);
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(arch.size()));
    out.write(arch.data(), static_cast<std::streamsize>(arch.size()));
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(flav.size()));
    out.write(flav.data(), static_cast<std::streamsize>(flav.size()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(p.value->rank()));
        for (std::size_t a = 0; a < p.value->rank(); ++a) {
            detail::put<std::uint64_t>(out, p.value->extent(a));
        }
        detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(sizeof(T)));
        out.write(reinterpret_cast<const char*>(p.value->data()),
                  static_cast<std::streamsize>(p.value->size() * sizeof(T)));
    }
    if (!out) throw IoError(IoErrorKind::bad_value, "short write to '" + path + "'");
}

struct CheckpointHeader {
    std::string arch;
    std::string flavor;
};

// Reads just the magic, version and identity strings, so a caller can build
// the right model before loading the tensors.
inline CheckpointHeader read_checkpoint_header(const std::string& path) {
    detail::ByteReader reader(detail::slurp(path), "checkpoint '" + path + "'");
    char magic[4];
    reader.read(magic, 4);
    if (std::memcmp(magic, "VWT1", 4) != 0) {
        throw IoError(IoErrorKind::bad_magic, "'" + path + "' is not a VWT1 checkpoint");
    }
    const auto version = reader.scalar<std::uint8_t>();
    if (version != 1) {
        throw IoError(IoErrorKind::bad_header,
                      "'" + path + "': unsupported version " + std::to_string(version));
    }
    CheckpointHeader header;
    header.arch = reader.string(reader.scalar<std::uint16_t>());
    header.flavor = reader.string(reader.scalar<std::uint16_t>());
    return header;
}

// Loads every model parameter from the checkpoint, matching by name. The
// file must carry exactly the model's tensors: a missing, extra, or
// misshapen tensor is reported by name.
template <typename T>
CheckpointHeader read_checkpoint_into(const std::string& path,
                                      const std::vector<ParamRef<T>>& params) {
    detail::ByteReader reader(detail::slurp(path), "checkpoint '" + path + "'");
    char magic[4];
    reader.read(magic, 4);
    if (std::memcmp(magic, "VWT1", 4) != 0) {
        throw IoError(IoErrorKind::bad_magic, "'" + path + "' is not a VWT1 checkpoint");
    }
    const auto version = reader.scalar<std::uint8_t>();
    if (version != 1) {
        throw IoError(IoErrorKind::bad_header,
                      "'" + path + "': unsupported version " + std::to_string(version));
    }
    CheckpointHeader header;
    header.arch = reader.string(reader.scalar<std::uint16_t>());
    header.flavor = reader.string(reader.scalar<std::uint16_t>());
    const auto count = reader.scalar<std::uint32_t>();

    struct Entry {
        Shape shape;
        std::vector<double> data;
    };
    std::map<std::string, Entry> entries;
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::string name = reader.string(reader.scalar<std::uint16_t>());
        const auto rank = reader.scalar<std::uint8_t>();
        Entry entry;
        std::size_t numel = 1;
        for (std::uint8_t a = 0; a < rank; ++a) {
            const auto extent = reader.scalar<std::uint64_t>();
            entry.shape.push_back(static_cast<std::size_t>(extent));
            numel = checked_mul(numel, static_cast<std::size_t>(extent));
        }
        const auto width = reader.scalar<std::uint8_t>();
        if (width != 4 && width != 8) {
            throw IoError(IoErrorKind::bad_header,
                          "'" + path + "': tensor '" + name + "' has unsupported element width " +
                              std::to_string(width));
        }
        entry.data.resize(numel);
        if (width == 4) {
            std::vector<float> raw(numel);
            reader.read(raw.data(), numel * 4);
            for (std::size_t i = 0; i < numel; ++i) entry.data[i] = raw[i];
        } else {
            reader.read(entry.data.data(), numel * 8);
        }
        if (!entries.emplace(name, std::move(entry)).second) {
            throw IoError(IoErrorKind::bad_header, "'" + path + "': duplicate tensor '" + name + "'");
        }
    }
    if (!reader.exhausted()) {
        throw IoError(IoErrorKind::bad_header,
                      "'" + path + "': " + std::to_string(reader.remaining()) +
                          " trailing bytes after last tensor");
    }

    for (const auto& p : params) {
        auto it = entries.find(p.name);
        if (it == entries.end()) {
            throw IoError(IoErrorKind::missing_tensor,
                          "'" + path + "': tensor '" + p.name + "' not in checkpoint");
        }
        if (it->second.shape != p.value->shape()) {
            throw IoError(IoErrorKind::shape_mismatch,
                          "'" + path + "': tensor '" + p.name + "' has shape " +
                              shape_str(it->second.shape) + ", model expects " +
                              shape_str(p.value->shape()));
        }
    }
    if (entries.size() != params.size()) {
        for (const auto& [name, entry] : entries) {
            bool known = false;
            for (const auto& p : params) {
                if (p.name == name) { known = true; break; }
            }
            if (!known) {
                throw IoError(IoErrorKind::extra_tensor,
                              "'" + path + "': tensor '" + name + "' unknown to this model");
            }
        }
    }
    // All validated; commit.
    for (const auto& p : params) {
        const auto& entry = entries.at(p.name);
        for (std::size_t i = 0; i < entry.data.size(); ++i) {
            p.value->at_flat(i) = static_cast<T>(entry.data[i]);
        }
    }
    return header;
}

}  // namespace volt3d
