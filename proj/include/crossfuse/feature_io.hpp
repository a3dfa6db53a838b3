#pragma once

// Binary per-frame feature files and the line-delimited dataset manifest.
//
// Feature file layout (all integers little-endian):
//   "FSEQ" | u32 version=1 | u8 modality (0 visual, 1 skeleton) | u8 ndim |
//   ndim x u32 dims | u8 dtype (1 = f32) | prod(dims) x f32, row-major
// Bytes after the payload form an opaque trailer and are ignored on read.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crossfuse/matrix.hpp"

namespace crossfuse {

inline constexpr std::size_t kVisualDim = 1408;
inline constexpr std::size_t kNumJoints = 24;
inline constexpr std::size_t kSkeletonDim = 3 * kNumJoints;
inline constexpr std::uint32_t kFeatureFormatVersion = 1;

enum class Modality : std::uint8_t { Visual = 0, Skeleton = 1 };
enum class Split { Train, Val, Test };

const char* to_string(Modality m);
const char* to_string(Split s);
Split parse_split(const std::string& s);

/// T x D frame features of one clip. Skeleton sequences keep the [T, 24, 3]
/// joint tensor flattened to [T, 72] in memory.
struct FeatureSequence {
    std::string clip_id;
    Modality modality = Modality::Visual;
    Matrix<float> data;

    std::size_t frames() const noexcept { return data.rows(); }
};

class FeatureIoError : public std::runtime_error {
public:
    enum class Kind {
        Io,
        BadMagic,
        UnsupportedVersion,
        TruncatedPayload,
        DimMismatch,
        BadDtype,
        BadModality,
        NonFinite,
        Manifest,
    };

    FeatureIoError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

const char* to_string(FeatureIoError::Kind k);

/// Checks the file-format invariants (finite entries, T >= 1, canonical dims).
/// Throws FeatureIoError.
void validate_sequence(const FeatureSequence& seq);

void write_sequence(const FeatureSequence& seq, const std::filesystem::path& path);
FeatureSequence read_sequence(const std::filesystem::path& path);

struct FeatureHeader {
    Modality modality = Modality::Visual;
    std::vector<std::uint32_t> dims;
    std::uintmax_t payload_bytes = 0;
    std::uintmax_t trailer_bytes = 0;
};

/// Parses and validates only the header (payload length included).
FeatureHeader read_header(const std::filesystem::path& path);

struct ClipRecord {
    std::string clip_id;
    int label_id = 0;
    std::string label_name;
    Split split = Split::Train;
    std::size_t t_clip = 0;
    std::string visual_path;
    std::string skeleton_path;
};

struct DatasetManifest {
    int num_classes = 0;
    std::vector<std::string> class_names;
    std::vector<ClipRecord> records;
    /// Directory relative paths are resolved against.
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const std::string& p) const;
    std::vector<const ClipRecord*> split(Split s) const;
};

/// Validates header/record consistency. With verify set, every referenced file
/// must exist and its header must agree with t_clip.
DatasetManifest load_manifest(const std::filesystem::path& path, bool verify = false);
void validate_manifest(const DatasetManifest& manifest, bool verify = false);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

}  // namespace crossfuse
