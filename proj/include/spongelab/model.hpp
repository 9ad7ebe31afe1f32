#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spongelab/autodiff.hpp"
#include "spongelab/synthetic.hpp"
#include "spongelab/tensor.hpp"
#include "spongelab/video.hpp"

namespace spongelab {

namespace token {
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int eos = 2;
inline constexpr int yes = 3;
inline constexpr int no = 4;
inline constexpr int first_free = 5;  // ids >= 5 form the sponge alphabet
}  // namespace token

/// Fixed stand-in for the takeover question.
inline const std::vector<int> kDefaultPrompt = {28, 29, 30, 31};

/// Prompt of the auxiliary description task used during pretraining.
inline const std::vector<int> kDescribePrompt = {25, 26, 27, 31};

inline constexpr int kDefaultMaxNewTokens = 128;
inline constexpr int kLongMaxNewTokens = 512;

struct ModelConfig {
  int vocab = 32;
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int ffn = 256;
  int patch = 8;  // spatial patch side
  int height = 32;
  int width = 32;
  int channels = 3;
  int context = 1024;
  bool tied = false;  // share token embedding and output projection

  int visual_tokens() const { return (height / patch) * (width / patch); }
  int patch_dim() const { return patch * patch * channels; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors of the toy video-language model. Immutable once
/// built; share freely across threads.
class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(ModelConfig config, std::map<std::string, Tensor> tensors);

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  const Tensor& at(const std::string& name) const;
  std::size_t parameter_count() const;
  bool bit_equal(const ModelParams& other) const;

  /// Expected parameter names and shapes for `config`.
  static std::map<std::string, Shape> layout(const ModelConfig& config);

 private:
  ModelConfig config_;
  std::map<std::string, Tensor> tensors_;
};

/// Checkpoint directory: one VDTN file per tensor plus `manifest.txt` with
/// `config <key> <int>` and `param <name> <file>` lines.
void save_params(const std::filesystem::path& dir, const ModelParams& params);
ModelParams load_params(const std::filesystem::path& dir);

/// Maps every pixel of one frame to its (visual token, feature) slot.
class PatchLayout {
 public:
  explicit PatchLayout(const ModelConfig& config);
  std::size_t token_of(std::size_t y, std::size_t x) const;
  std::size_t feature_of(std::size_t y, std::size_t x, std::size_t c) const;
  /// Flat index into the [tokens, patch_dim] pooled matrix.
  std::size_t slot(std::size_t y, std::size_t x, std::size_t c) const;
  std::size_t tokens() const { return tokens_; }
  std::size_t dim() const { return dim_; }

 private:
  std::size_t patch_, channels_, grid_w_, tokens_, dim_;
};

/// Splits each frame into patch vectors and averages them over time:
/// returns [visual_tokens, patch_dim]. The projection is linear, so
/// projecting then pooling equals pooling then projecting.
Tensor pool_patches(const VideoTensor& video, const ModelConfig& config);

/// Parameter leaves for one expression graph.
using ParamLeaves = std::map<std::string, ad::Expr>;
ParamLeaves make_leaves(const ModelParams& params, bool trainable);

/// Visual embeddings Z_v = pooled * W + b + positional, shape [N, D].
ad::Expr encode_video(const ParamLeaves& p, const ModelConfig& cfg, const ad::Expr& pooled);
Tensor encode_video(const VideoTensor& video, const ModelParams& params);

/// Next-token logits at every position of `text` (which starts with BOS),
/// shape [len(text), V]. Visual tokens are visible to every text position;
/// text positions are causally masked.
ad::Expr forward_logits(const ParamLeaves& p, const ModelConfig& cfg, const ad::Expr& pooled,
                        std::span<const int> text);
Tensor forward_logits(const VideoTensor& video, std::span<const int> text,
                      const ModelParams& params);

/// Incremental decoder over a fixed visual context with cached keys and values.
class DecodeSession {
 public:
  DecodeSession(const ModelParams& params, const Tensor& pooled);
  /// Appends `token` and returns the next-token logits after it.
  std::vector<double> feed(int token);
  std::size_t text_length() const { return text_len_; }

 private:
  const ModelParams* params_;
  std::size_t visual_;
  std::size_t text_len_ = 0;
  // keys_[layer] and values_[layer] are row-major [positions, d_model].
  std::vector<std::vector<double>> keys_, values_;
};

struct DecodeConfig {
  double temperature = 0.0;  // 0 selects greedy decoding
  int max_new_tokens = kDefaultMaxNewTokens;
  std::uint64_t seed = 0;
};

enum class StopReason { eos, max_new_tokens };
std::string to_string(StopReason r);

struct GenerationTrace {
  std::vector<int> tokens;
  std::vector<std::vector<double>> probs;  // next-token distribution per step
  std::vector<double> wall_s;
  StopReason reason = StopReason::max_new_tokens;

  double p_eos(std::size_t step) const { return probs.at(step).at(token::eos); }
  double total_wall_s() const;
  /// JSON lines {step, token, p_eos, wall_s}.
  std::string to_jsonl() const;
};

/// Index of the largest entry, lowest index on ties.
int argmax(std::span<const double> values);
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);

GenerationTrace generate(const ModelParams& params, const Tensor& pooled,
                         std::span<const int> prompt, const DecodeConfig& cfg);
GenerationTrace generate(const ModelParams& params, const VideoTensor& video,
                         std::span<const int> prompt, const DecodeConfig& cfg);

struct PretrainConfig {
  int epochs = 30;
  double lr = 2e-3;
  int batch = 16;
  std::uint64_t seed = 1;
  double accuracy_gate = 0.95;
  // Auxiliary open-ended description task; 0 disables it.
  int describe_length = 24;
  double describe_weight = 1.0;
};

struct PretrainResult {
  ModelParams params;
  double heldout_accuracy = 0.0;
  std::vector<double> epoch_loss;
  bool gate_passed = false;
};

/// Open-ended description of a clip: a 4-token cycle chosen by domain and
/// direction (static clips get their own), with no EOS. Static clips are
/// answered with their description even under the question prompt.
std::vector<int> describe_target(const VideoSample& sample, int length);

/// Teacher-forced cross-entropy on "[YES|NO] EOS" after BOS + prompt, with Adam.
PretrainResult pretrain(const std::vector<VideoSample>& train,
                        const std::vector<VideoSample>& heldout, const ModelConfig& config,
                        const PretrainConfig& cfg);

/// Fraction of samples whose first answer step prefers the right one of YES/NO.
double answer_accuracy(const ModelParams& params, const std::vector<VideoSample>& samples,
                       std::span<const int> prompt = kDefaultPrompt);

}  // namespace spongelab
