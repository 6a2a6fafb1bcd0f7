#pragma once

// Corpora, batch streams, hidden-state trace files and CSV/JSON reports.
//
// Binary formats (all integers little-endian):
//
//   JREGTOKS  "JREGTOKS" u32 version u32 vocab_size u64 count, u32 ids[count]
//   JREGTRAC  "JREGTRAC" u32 version u32 L u32 D u64 n_positions,
//             f32 values[(L+1)·n_positions·D], layer-major then position-major

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "jreg/metrics.hpp"
#include "jreg/model.hpp"

namespace jreg {

inline constexpr std::uint32_t kCorpusVersion = 1;
inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr double kDefaultValidationFraction = 0.1;

struct TokenCorpus {
  std::vector<std::int32_t> tokens;
  std::uint32_t vocab_size = 256;
  std::size_t train_end = 0;  // [0, train_end) trains, [train_end, size) validates

  std::span<const std::int32_t> train() const { return std::span(tokens).first(train_end); }
  std::span<const std::int32_t> validation() const { return std::span(tokens).subspan(train_end); }
  void split(double validation_fraction);
  void validate() const;
};

void save_corpus(const std::filesystem::path& path, const TokenCorpus& corpus);
TokenCorpus load_corpus(const std::filesystem::path& path, double validation_fraction = kDefaultValidationFraction);

enum class SynthKind { markov_bytes, repeated_patterns };
SynthKind parse_synth_kind(std::string_view s);
std::string_view to_string(SynthKind k);

// Deterministic byte-level corpora with learnable structure:
//  markov_bytes       order-2 chain over a 64-symbol alphabet, 4 successors per state
//  repeated_patterns  a fixed bank of short motifs interleaved with uniform noise bytes
TokenCorpus synth_corpus(SynthKind kind, std::size_t size, std::uint64_t seed,
                         double validation_fraction = kDefaultValidationFraction);

// Contiguous non-overlapping windows of seq_len inputs (targets shifted by
// one), visited in a seeded permutation that is redrawn every epoch.
class BatchStream {
 public:
  BatchStream(std::span<const std::int32_t> region, std::size_t seq_len, std::size_t batch_size, std::uint64_t seed);

  TokenBatch next();

  std::uint64_t cursor() const { return cursor_; }
  void seek(std::uint64_t cursor);
  std::size_t windows_per_epoch() const { return n_windows_; }
  std::uint64_t epoch() const { return cursor_ / n_windows_; }
  // Window visiting order for one epoch.
  std::vector<std::uint32_t> epoch_order(std::uint64_t epoch) const;

 private:
  std::span<const std::int32_t> region_;
  std::size_t seq_len_, batch_size_, n_windows_;
  std::uint64_t seed_;
  std::uint64_t cursor_ = 0;
  std::uint64_t cached_epoch_ = UINT64_MAX;
  std::vector<std::uint32_t> order_;
};

std::size_t window_count(std::span<const std::int32_t> region, std::size_t seq_len);
TokenBatch window_batch(std::span<const std::int32_t> region, std::size_t seq_len,
                        std::span<const std::uint32_t> windows);

// Fixed held-out batch: n windows drawn once (seeded) from the validation split.
TokenBatch probe_batch(const TokenCorpus& corpus, std::size_t seq_len, std::size_t n, std::uint64_t seed);

// The first n_windows validation windows, grouped into batches.
std::vector<TokenBatch> validation_batches(const TokenCorpus& corpus, std::size_t seq_len, std::size_t n_windows,
                                           std::size_t batch_size);

// ---- traces --------------------------------------------------------------

// Writes the trace's real positions only, rounded to float32.
void write_trace(const std::filesystem::path& path, const HiddenTrace& trace);
HiddenTrace read_trace(const std::filesystem::path& path);

// ---- reports -------------------------------------------------------------

enum class ReportFormat { csv, json };
ReportFormat parse_report_format(std::string_view s);
// csv unless the extension is .json
ReportFormat format_for_path(const std::filesystem::path& path);

struct ReportColumn {
  std::string name;
  bool integer = false;
};

struct ReportTable {
  std::vector<ReportColumn> columns;
  std::vector<std::vector<double>> rows;
};

// Shortest round-trip decimal for every value.
std::string format_number(double v);
std::string render_report(const ReportTable& table, ReportFormat format);
void write_report(const ReportTable& table, const std::filesystem::path& path, ReportFormat format);
void write_report(const ReportTable& table, const std::filesystem::path& path);
ReportTable read_report(const std::filesystem::path& path);

ReportTable profile_table(const DisplacementProfile& profile);
ReportTable jump_table(const JumpReport& report);
ReportTable delta_table(const DisplacementProfile& a, const DisplacementProfile& b);
DisplacementProfile profile_from_table(const ReportTable& table);
DisplacementProfile read_profile(const std::filesystem::path& path);

}  // namespace jreg
