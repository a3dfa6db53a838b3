#pragma once

// Checkpoint container:
//   "FCKP" | u32 version=1 | u64 meta_len | meta (UTF-8 JSON) | u32 n_tensors |
//   n x ( u32 name_len | name | u8 ndim | ndim x u32 dims | f32 payload )
// All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossfuse/fusion_net.hpp"
#include "crossfuse/matrix.hpp"
#include "crossfuse/params.hpp"
#include "crossfuse/train_loop.hpp"

namespace crossfuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CheckpointTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<CheckpointTensor> tensors;

    const CheckpointTensor* find(const std::string& name) const;
};

/// Writes to a temporary sibling and renames, so an existing file is replaced atomically.
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <class Params>
void store_tensors(Checkpoint& ckpt, const Params& params, const std::string& prefix) {
    for_each_tensor(params, [&](const std::string& name, const auto& t, TensorRole) {
        CheckpointTensor ct{prefix + name, {static_cast<std::uint32_t>(t.rows()), static_cast<std::uint32_t>(t.cols())}, {}};
        ct.data.reserve(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) ct.data.push_back(static_cast<float>(t[i]));
        ckpt.tensors.push_back(std::move(ct));
    });
}

/// `params` must already have the expected shapes; every tensor must be present.
template <class Params>
void load_tensors(const Checkpoint& ckpt, Params& params, const std::string& prefix) {
    for_each_tensor(params, [&](const std::string& name, auto& t, TensorRole) {
        const CheckpointTensor* ct = ckpt.find(prefix + name);
        if (!ct) throw CheckpointError("checkpoint is missing tensor '" + prefix + name + "'");
        if (ct->dims.size() != 2 || ct->dims[0] != t.rows() || ct->dims[1] != t.cols())
            throw CheckpointError("checkpoint tensor '" + prefix + name + "' has the wrong shape");
        using Real = std::remove_cvref_t<decltype(t[0])>;
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(ct->data[i]);
    });
}

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
/// Strict: unknown keys and wrongly typed values throw std::invalid_argument.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Model tensors plus optional metadata; "variant" and "model_config" are always written.
Checkpoint make_checkpoint(const TrainedModel& model, nlohmann::json meta = nlohmann::json::object());
TrainedModel load_model(const Checkpoint& ckpt);

}  // namespace crossfuse
