#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spongelab/video.hpp"

namespace spongelab {

enum class Label { yes, no };
enum class Domain { a, b };

std::string to_string(Label label);
std::string to_string(Domain domain);
Label parse_label(const std::string& s);
Domain parse_domain(const std::string& s);

struct SyntheticConfig {
  int frames = 8;
  int height = 32;
  int width = 32;
  int channels = 3;
  double noise = 0.1;   // background noise amplitude (l-inf)
  int object_size = 6;  // square side / circle diameter, pixels
  int travel = 14;      // total displacement across the clip, pixels
};

struct VideoSample {
  VideoTensor video;
  Label label = Label::yes;
  Domain domain = Domain::a;
  int id = 0;
  std::uint64_t seed = 0;
  bool moving = true;  // false: the object stays put and the question has no answer
};

/// Domain A: a bright square moving right (yes) or left (no) over dark noise.
/// Domain B: a dark disc moving down (yes) or up (no) over bright noise.
/// The object's colour shifts steadily along its path, so the direction is
/// still recoverable after averaging the frames.
VideoSample gen_video(std::uint64_t seed, Label label, Domain domain,
                      const SyntheticConfig& cfg = {}, int id = 0);

/// Same scene layout rules, but the object never moves.
VideoSample gen_static_video(std::uint64_t seed, Domain domain, const SyntheticConfig& cfg = {},
                             int id = 0);
std::vector<VideoSample> gen_static_samples(int n, std::uint64_t seed, Domain domain,
                                            const SyntheticConfig& cfg = {}, int first_id = 0);

/// `n` samples with alternating labels (yes first) and seeds drawn from the
/// stream identified by (seed, stream).
std::vector<VideoSample> gen_samples(int n, std::uint64_t seed, std::uint64_t stream,
                                     Domain domain, const SyntheticConfig& cfg = {},
                                     int first_id = 0);

struct DatasetSplit {
  std::vector<VideoSample> train;
  std::vector<VideoSample> heldout;
};

/// Train and held-out collections with disjoint seed sets and balanced labels.
DatasetSplit gen_dataset(int n_train, int n_heldout, std::uint64_t seed, Domain domain,
                         const SyntheticConfig& cfg = {});

/// Sliding windows cut from three-clip streams with random labels, `per_stream`
/// windows per stream. Early windows repeat the first frame on the left. Each
/// window takes the label of the clip that fills most of it.
std::vector<VideoSample> gen_window_samples(int n_streams, int per_stream, int window,
                                            std::uint64_t seed, Domain domain,
                                            const SyntheticConfig& cfg = {}, int first_id = 0);

/// Victim pretraining data: moving clips from both domains, static clips and
/// stream windows, plus held-out moving clips from domain A. Ids are unique.
struct PretrainCorpus {
  std::vector<VideoSample> train;
  std::vector<VideoSample> heldout;
};
PretrainCorpus gen_pretrain_corpus(int n_per_domain = 256, int n_static_per_domain = 32,
                                   int n_heldout = 64, std::uint64_t seed = 11,
                                   const SyntheticConfig& cfg = {}, int n_window_streams = 48);

/// A continuous stream of `n_frames` frames built from consecutive clips
/// with alternating labels.
VideoTensor gen_stream(int n_frames, std::uint64_t seed, Domain domain,
                       const SyntheticConfig& cfg = {});

/// Directory layout: one VDTN file per video, `manifest.jsonl` with one
/// {id, seed, label, domain, moving, file} object per line, and `dataset.json` with the
/// sample count and video extents.
void save_dataset(const std::filesystem::path& dir, const std::vector<VideoSample>& samples);
std::vector<VideoSample> load_dataset(const std::filesystem::path& dir);

}  // namespace spongelab
