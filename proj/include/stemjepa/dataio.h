#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "stemjepa/audio.h"

namespace stemjepa {

using DataRng = std::mt19937_64;

std::vector<std::string> default_labels();

struct StemChunk {
    AudioChunk audio;
    std::string label;
};

struct MultiTrackChunk {
    std::vector<StemChunk> stems;
    std::string track_id;
    double offset = 0.0;  // seconds into the source track

    std::size_t num_samples() const { return stems.empty() ? 0 : stems.front().audio.size(); }
};

struct ActivityConfig {
    double threshold_db = -50.0;
    double window_s = 0.5;
    double hop_s = 0.25;
};

struct ActivityMask {
    std::vector<int> active;                  // sorted stem indices
    std::vector<std::vector<double>> rms_db;  // per stem, per window
    std::vector<double> max_rms_db;           // per stem

    bool is_active(int stem) const;
};

struct ContextTargetPair {
    AudioChunk context;
    AudioChunk target;
    std::string target_label;
    std::vector<int> context_indices;
    int target_index = -1;
};

// Returned when fewer than two stems are active; the caller re-crops the same track.
struct NeedsResample {};

using SampleResult = std::variant<ContextTargetPair, NeedsResample>;

// Windowed RMS in dBFS; windows of `window_s` every `hop_s`, the last one aligned to the end.
std::vector<double> windowed_rms_db(const AudioChunk& audio, double window_s, double hop_s);

ActivityMask detect_active_stems(const MultiTrackChunk& chunk, const ActivityConfig& cfg);
ActivityMask detect_active_stems(const MultiTrackChunk& chunk, double threshold_db);

SampleResult sample_context_target(const MultiTrackChunk& chunk, const ActivityMask& mask, DataRng& rng);

// Element-wise sum without normalization or clipping.
AudioChunk mix_stems(std::span<const AudioChunk> stems);

// ---------------------------------------------------------------------------
// Corpus

struct StemFile {
    std::string label;
    std::filesystem::path path;  // absolute
};

struct TrackEntry {
    std::string id;
    std::vector<StemFile> stems;  // ordered by the corpus label list
    std::uint64_t frames = 0;     // common length in samples
    std::map<std::string, std::string> metadata;
};

// A set of multitrack songs described by a JSON manifest:
// {"format": "stemjepa-corpus", "version": 1, "sample_rate": 16000, "labels": [...],
//  "tracks": {"<id>": {"<label>": "<relative wav path>", ...}, ...},
//  "metadata": {"<id>": {"key": "...", ...}}}
class Corpus {
public:
    static constexpr int kManifestVersion = 1;

    static Corpus load(const std::filesystem::path& manifest_path);

    const std::filesystem::path& root() const { return root_; }
    int sample_rate() const { return sample_rate_; }
    const std::vector<std::string>& labels() const { return labels_; }
    const std::vector<TrackEntry>& tracks() const { return tracks_; }
    const TrackEntry& track(std::size_t i) const { return tracks_.at(i); }
    std::size_t size() const { return tracks_.size(); }

    double track_duration(std::size_t i) const;

    // Reads `count` samples of every stem starting at sample `offset`.
    MultiTrackChunk read(std::size_t track_index, std::uint64_t offset, std::uint64_t count) const;
    MultiTrackChunk read_full(std::size_t track_index) const;

    // Splits track indices into (train, holdout); holdout is the last `holdout` tracks by id.
    std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split(std::size_t holdout) const;

private:
    std::filesystem::path root_;
    int sample_rate_ = 16000;
    std::vector<std::string> labels_;
    std::vector<TrackEntry> tracks_;
};

// Crops an aligned window of `duration` seconds with a uniform random offset.
// Returns nullopt (skip event) when the track is shorter than `duration`.
std::optional<MultiTrackChunk> crop_chunk(const Corpus& corpus, std::size_t track_index, double duration,
                                          DataRng& rng);

struct PairSamplerConfig {
    double chunk_duration = 8.0;
    ActivityConfig activity;
    int max_resample = 10;
    int max_track_attempts = 64;
};

// Draws one training pair: random track, crop, activity check, and up to
// `max_resample` re-crops of the same track before the track is skipped.
// Skipped tracks are appended to `skipped`.
std::optional<ContextTargetPair> draw_training_pair(const Corpus& corpus, std::span<const std::size_t> pool,
                                                    const PairSamplerConfig& cfg, DataRng& rng,
                                                    std::vector<std::string>* skipped = nullptr);

// Independent stream per (seed, worker, step, slot).
DataRng make_stream(std::uint64_t seed, std::uint64_t worker, std::uint64_t step, std::uint64_t slot);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthSpec {
    int tracks = 10;
    double duration = 30.0;
    double tempo_min = 90.0;
    double tempo_max = 140.0;
    std::vector<std::string> keys{"C", "G", "D", "A", "E", "F", "Bb", "Eb", "Am", "Em", "Dm", "Bm"};
    int sample_rate = 16000;
    bool write_mixture = true;

    void validate() const;
};

struct MusicalKey {
    int tonic = 0;  // pitch class, C = 0
    bool minor = false;
    std::string name;

    std::vector<int> scale() const;  // 7 pitch classes
};

MusicalKey parse_key(const std::string& name);

struct SynthTrack {
    std::string id;
    MusicalKey key;
    double tempo = 120.0;
    std::vector<AudioChunk> stems;  // bass, drums, vocals, other
    struct Segment {
        double start = 0.0;
        double end = 0.0;
        std::string chord;
    };
    std::vector<Segment> chords;
};

// Renders one track; deterministic in (spec, seed, index).
SynthTrack synthesize_track(const SynthSpec& spec, std::uint64_t seed, int index);

// Writes <out>/manifest.json, <out>/<track>/<label>.wav, annotations.jsonl and
// tasks/key.jsonl. Returns the manifest path.
std::filesystem::path generate_synthetic_corpus(const SynthSpec& spec, std::uint64_t seed,
                                                const std::filesystem::path& out_dir);

// Converts a MUSDB18-HQ style directory (<split>/<track>/{bass,drums,vocals,other}.wav)
// into a manifest-backed corpus at `cache_dir`, resampled to `sample_rate` mono.
std::filesystem::path import_musdb(const std::filesystem::path& musdb_root, const std::filesystem::path& cache_dir,
                                   int sample_rate);

}  // namespace stemjepa
