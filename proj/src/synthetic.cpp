#include "spongelab/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "spongelab/error.hpp"
#include "spongelab/rng.hpp"
#include "spongelab/tensor_io.hpp"

namespace spongelab {

using json = nlohmann::json;

std::string to_string(Label label) { return label == Label::yes ? "YES" : "NO"; }
std::string to_string(Domain domain) { return domain == Domain::a ? "A" : "B"; }

Label parse_label(const std::string& s) {
  if (s == "YES") return Label::yes;
  if (s == "NO") return Label::no;
  throw ValidationError("unknown label '" + s + "'");
}

Domain parse_domain(const std::string& s) {
  if (s == "A" || s == "a") return Domain::a;
  if (s == "B" || s == "b") return Domain::b;
  throw ValidationError("unknown domain '" + s + "'");
}

namespace {

void validate(const SyntheticConfig& cfg) {
  if (cfg.frames < 1 || cfg.height < 1 || cfg.width < 1 || cfg.channels < 1) {
    throw ValidationError("video extents must be positive");
  }
  if (cfg.noise < 0.0 || cfg.noise > 0.1) throw ValidationError("noise amplitude must be in [0, 0.1]");
  const int span = cfg.object_size + cfg.travel;
  if (cfg.object_size < 1 || span > std::min(cfg.height, cfg.width)) {
    throw ValidationError("object path does not fit in the frame");
  }
}

// Fraction of the clip elapsed at frame t.
double progress(int t, int frames) {
  return frames > 1 ? static_cast<double>(t) / (frames - 1) : 1.0;
}

int offset_at(int t, const SyntheticConfig& cfg) {
  return static_cast<int>(std::lround(cfg.travel * progress(t, cfg.frames)));
}

}  // namespace

VideoSample gen_video(std::uint64_t seed, Label label, Domain domain, const SyntheticConfig& cfg,
                      int id) {
  validate(cfg);
  Rng rng(mix_seed(seed, domain == Domain::a ? 0xA : 0xB));
  const int T = cfg.frames, H = cfg.height, W = cfg.width, C = cfg.channels;
  const int size = cfg.object_size;
  std::vector<double> px(static_cast<std::size_t>(T) * H * W * C);
  const bool bright_bg = domain == Domain::b;
  for (auto& v : px) {
    const double n = rng.uniform(0.0, cfg.noise);
    v = bright_bg ? 0.9 - n : n;
  }
  auto at = [&](int t, int y, int x, int c) -> double& {
    return px[((static_cast<std::size_t>(t) * H + y) * W + x) * C + c];
  };

  const bool forward = label == Label::yes;
  // Position along the motion axis and across it.
  const int lane_extent = (domain == Domain::a ? H : W) - size;
  const int across = static_cast<int>(rng.below(static_cast<std::uint64_t>(lane_extent + 1)));
  const int start_range = (domain == Domain::a ? W : H) - size - cfg.travel;
  const int start0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(start_range + 1)));
  const int start = forward ? start0 : start0 + cfg.travel;

  for (int t = 0; t < T; ++t) {
    const int along = forward ? start + offset_at(t, cfg) : start - offset_at(t, cfg);
    // The first channel rises and the last falls over the clip, so each
    // pooled pixel records when the object passed it.
    const double ramp = 0.2 + 0.8 * progress(t, T);
    auto color = [&](int c) {
      if (C == 1 || c == 0) return ramp;
      if (c == C - 1) return 1.2 - ramp;
      return 1.0;
    };
    if (domain == Domain::a) {
      for (int y = across; y < across + size; ++y)
        for (int x = along; x < along + size; ++x)
          for (int c = 0; c < C; ++c) at(t, y, x, c) = color(c);
    } else {
      const double r = size / 2.0;
      const double cy = along + r - 0.5, cx = across + r - 0.5;
      for (int y = along; y < along + size; ++y)
        for (int x = across; x < across + size; ++x) {
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) > r * r) continue;
          for (int c = 0; c < C; ++c) at(t, y, x, c) = 0.75 * color(c) - 0.1;
        }
    }
  }
  for (auto& v : px) v = std::clamp(v, 0.0, 1.0);

  VideoSample s;
  s.video = VideoTensor(Tensor({static_cast<std::size_t>(T), static_cast<std::size_t>(H),
                                static_cast<std::size_t>(W), static_cast<std::size_t>(C)},
                               std::move(px)));
  s.label = label;
  s.domain = domain;
  s.id = id;
  s.seed = seed;
  return s;
}

std::vector<VideoSample> gen_samples(int n, std::uint64_t seed, std::uint64_t stream,
                                     Domain domain, const SyntheticConfig& cfg, int first_id) {
  std::vector<VideoSample> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) {
    const std::uint64_t s = mix_seed(mix_seed(seed, stream), static_cast<std::uint64_t>(i));
    out.push_back(gen_video(s, i % 2 == 0 ? Label::yes : Label::no, domain, cfg, first_id + i));
  }
  return out;
}

VideoSample gen_static_video(std::uint64_t seed, Domain domain, const SyntheticConfig& cfg,
                             int id) {
  SyntheticConfig still = cfg;
  still.travel = 0;
  auto s = gen_video(seed, Label::yes, domain, still, id);
  s.moving = false;
  return s;
}

std::vector<VideoSample> gen_static_samples(int n, std::uint64_t seed, Domain domain,
                                            const SyntheticConfig& cfg, int first_id) {
  if (n < 0) throw ValidationError("sample count must be non-negative");
  Rng rng(mix_seed(mix_seed(seed, 4), domain == Domain::a ? 0xA : 0xB));
  std::vector<VideoSample> out;
  for (int i = 0; i < n; ++i) out.push_back(gen_static_video(rng.next(), domain, cfg, first_id + i));
  return out;
}

DatasetSplit gen_dataset(int n_train, int n_heldout, std::uint64_t seed, Domain domain,
                         const SyntheticConfig& cfg) {
  if (n_train < 2 || n_heldout < 0) throw ValidationError("need at least 2 training samples");
  DatasetSplit split;
  split.train = gen_samples(n_train, seed, 1, domain, cfg, 0);
  split.heldout = gen_samples(n_heldout, seed, 2, domain, cfg, n_train);
  std::set<std::uint64_t> seen;
  for (const auto& s : split.train) seen.insert(s.seed);
  for (const auto& s : split.heldout) {
    if (seen.contains(s.seed)) throw Error("seed collision between train and held-out splits");
  }
  return split;
}

PretrainCorpus gen_pretrain_corpus(int n_per_domain, int n_static_per_domain, int n_heldout,
                                   std::uint64_t seed, const SyntheticConfig& cfg,
                                   int n_window_streams) {
  if (n_static_per_domain < 0) throw ValidationError("static clip count must be non-negative");
  const auto a = gen_dataset(n_per_domain, n_heldout, seed, Domain::a, cfg);
  const auto b = gen_dataset(n_per_domain, 0, mix_seed(seed, 1), Domain::b, cfg);
  PretrainCorpus corpus;
  corpus.train = a.train;
  corpus.train.insert(corpus.train.end(), b.train.begin(), b.train.end());
  int next_id = 2 * n_per_domain + n_heldout;
  for (Domain d : {Domain::a, Domain::b}) {
    const auto still = gen_static_samples(n_static_per_domain, seed, d, cfg, next_id);
    corpus.train.insert(corpus.train.end(), still.begin(), still.end());
    next_id += n_static_per_domain;
  }
  for (Domain d : {Domain::a, Domain::b}) {
    const auto windows =
        gen_window_samples(n_window_streams, 8, cfg.frames, seed, d, cfg, next_id);
    corpus.train.insert(corpus.train.end(), windows.begin(), windows.end());
    next_id += static_cast<int>(windows.size());
  }
  // Ids of the domain-B clips continue after domain A's.
  for (std::size_t i = 0; i < static_cast<std::size_t>(n_per_domain); ++i) {
    corpus.train[static_cast<std::size_t>(n_per_domain) + i].id = n_per_domain + n_heldout + static_cast<int>(i);
  }
  corpus.heldout = a.heldout;
  return corpus;
}

namespace {

VideoTensor concat_clips(const std::vector<VideoSample>& clips, int n_frames) {
  const std::size_t fs = clips.front().video.frame_size();
  std::vector<double> px;
  px.reserve(static_cast<std::size_t>(n_frames) * fs);
  for (const auto& s : clips) {
    const auto d = s.video.pixels().data();
    px.insert(px.end(), d.begin(), d.end());
  }
  px.resize(static_cast<std::size_t>(n_frames) * fs);
  const auto& v = clips.front().video;
  return VideoTensor(
      Tensor({static_cast<std::size_t>(n_frames), v.height(), v.width(), v.channels()},
             std::move(px)));
}

}  // namespace

VideoTensor gen_stream(int n_frames, std::uint64_t seed, Domain domain,
                       const SyntheticConfig& cfg) {
  if (n_frames < 1) throw ValidationError("stream needs at least one frame");
  const int clips = (n_frames + cfg.frames - 1) / cfg.frames;
  return concat_clips(gen_samples(clips, seed, 3, domain, cfg), n_frames);
}

std::vector<VideoSample> gen_window_samples(int n_streams, int per_stream, int window,
                                            std::uint64_t seed, Domain domain,
                                            const SyntheticConfig& cfg, int first_id) {
  if (n_streams < 0 || per_stream < 0 || window < 1) {
    throw ValidationError("window sample counts must be non-negative and windows non-empty");
  }
  constexpr int kClips = 3;
  Rng rng(mix_seed(mix_seed(seed, 5), domain == Domain::a ? 0xA : 0xB));
  const int total = kClips * cfg.frames;
  std::vector<VideoSample> out;
  for (int s = 0; s < n_streams; ++s) {
    std::vector<VideoSample> clips;
    for (int k = 0; k < kClips; ++k) {
      const Label label = rng.below(2) == 0 ? Label::yes : Label::no;
      clips.push_back(gen_video(rng.next(), label, domain, cfg));
    }
    const VideoTensor stream = concat_clips(clips, total);
    for (int w = 0; w < per_stream; ++w) {
      const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(total)));
      std::vector<std::size_t> idx;
      std::vector<int> votes(kClips, 0);
      for (int k = t - window + 1; k <= t; ++k) {
        const int f = std::max(k, 1) - 1;
        idx.push_back(static_cast<std::size_t>(f));
        ++votes[static_cast<std::size_t>(f / cfg.frames)];
      }
      // Majority clip, the newer one on ties.
      int best = 0;
      for (int k = 1; k < kClips; ++k) {
        if (votes[static_cast<std::size_t>(k)] >= votes[static_cast<std::size_t>(best)]) best = k;
      }
      VideoSample sample;
      sample.video = stream.select_frames(idx);
      sample.label = clips[static_cast<std::size_t>(best)].label;
      sample.domain = domain;
      sample.seed = clips[static_cast<std::size_t>(best)].seed;
      sample.id = first_id + static_cast<int>(out.size());
      out.push_back(std::move(sample));
    }
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<VideoSample>& samples) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
  if (!manifest) throw Error("cannot write manifest in " + dir.string());
  for (const auto& s : samples) {
    const std::string file = "video_" + std::to_string(s.id) + ".vdtn";
    save_tensor(dir / file, s.video.pixels());
    json rec = {{"id", s.id},
                {"seed", s.seed},
                {"label", to_string(s.label)},
                {"domain", to_string(s.domain)},
                {"moving", s.moving},
                {"file", file}};
    manifest << rec.dump() << '\n';
  }
  json meta = {{"count", samples.size()}};
  if (!samples.empty()) {
    const auto& v = samples.front().video;
    meta["frames"] = v.frames();
    meta["height"] = v.height();
    meta["width"] = v.width();
    meta["channels"] = v.channels();
  }
  std::ofstream(dir / "dataset.json", std::ios::trunc) << meta.dump() << '\n';
}

std::vector<VideoSample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "dataset.json");
  if (!meta_in) throw FormatError((dir / "dataset.json").string() + ": missing file");
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::exception& e) {
    throw FormatError((dir / "dataset.json").string() + ": " + e.what());
  }
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw FormatError((dir / "manifest.jsonl").string() + ": missing file");

  std::vector<VideoSample> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("manifest line " + std::to_string(out.size() + 1) + ": " + e.what());
    }
    const auto file = dir / rec.at("file").get<std::string>();
    Tensor pixels;
    try {
      pixels = load_tensor(file);
    } catch (const FormatError& e) {
      throw FormatError(std::string("dataset video: ") + e.what());
    }
    const Shape expected{meta.at("frames").get<std::size_t>(), meta.at("height").get<std::size_t>(),
                         meta.at("width").get<std::size_t>(), meta.at("channels").get<std::size_t>()};
    if (pixels.shape() != expected) {
      throw FormatError(file.string() + ": shape " + shape_to_string(pixels.shape()) +
                        " does not match manifest " + shape_to_string(expected));
    }
    VideoSample s;
    s.video = VideoTensor(std::move(pixels));
    s.id = rec.at("id").get<int>();
    s.seed = rec.at("seed").get<std::uint64_t>();
    s.label = parse_label(rec.at("label").get<std::string>());
    s.domain = parse_domain(rec.at("domain").get<std::string>());
    s.moving = rec.value("moving", true);
    out.push_back(std::move(s));
  }
  const auto count = meta.at("count").get<std::size_t>();
  if (out.size() != count) {
    throw FormatError("manifest lists " + std::to_string(out.size()) + " videos but dataset.json says " +
                      std::to_string(count));
  }
  return out;
}

}  // namespace spongelab
