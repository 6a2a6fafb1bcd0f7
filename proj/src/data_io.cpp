#include "jreg/data_io.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "jreg/detail/binary_io.hpp"
#include "jreg/detail/rng.hpp"
#include "jreg/errors.hpp"

namespace jreg {

namespace {

constexpr std::string_view kCorpusMagic = "JREGTOKS";
constexpr std::string_view kTraceMagic = "JREGTRAC";

}  // namespace

// ---- corpus ----------------------------------------------------------------

void TokenCorpus::split(double validation_fraction) {
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ContractError("validation fraction must lie in [0, 1)");
  }
  const auto n = tokens.size();
  train_end = n - static_cast<std::size_t>(std::floor(static_cast<double>(n) * validation_fraction));
}

void TokenCorpus::validate() const {
  if (vocab_size == 0) throw ContractError("corpus vocabulary is empty");
  if (train_end > tokens.size()) throw ContractError("corpus split marker beyond end of corpus");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::uint32_t>(tokens[i]) >= vocab_size) {
      throw VocabularyError("corpus token " + std::to_string(tokens[i]) + " at index " + std::to_string(i) +
                            " outside vocabulary of size " + std::to_string(vocab_size));
    }
  }
}

void save_corpus(const std::filesystem::path& path, const TokenCorpus& corpus) {
  corpus.validate();
  detail::ByteWriter w;
  w.bytes(kCorpusMagic);
  w.u32(kCorpusVersion);
  w.u32(corpus.vocab_size);
  w.u64(corpus.tokens.size());
  for (auto id : corpus.tokens) w.u32(static_cast<std::uint32_t>(id));
  w.write_file(path);
}

TokenCorpus load_corpus(const std::filesystem::path& path, double validation_fraction) {
  auto r = detail::ByteReader::from_file(path);
  r.expect_magic(kCorpusMagic, "token corpus");
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kCorpusVersion) throw FormatError("unsupported corpus version " + std::to_string(version), version_at);
  TokenCorpus c;
  c.vocab_size = r.u32("vocab_size");
  const auto count = r.u64("token count");
  r.need(count * 4, "token payload");
  c.tokens.resize(count);
  for (auto& id : c.tokens) {
    const auto at = r.offset();
    const auto v = r.u32("token id");
    if (v >= c.vocab_size) {
      throw FormatError("token id " + std::to_string(v) + " outside vocabulary of size " +
                            std::to_string(c.vocab_size),
                        at);
    }
    id = static_cast<std::int32_t>(v);
  }
  r.expect_end("token payload");
  c.split(validation_fraction);
  return c;
}

SynthKind parse_synth_kind(std::string_view s) {
  if (s == "markov_bytes") return SynthKind::markov_bytes;
  if (s == "repeated_patterns") return SynthKind::repeated_patterns;
  throw ContractError("unknown synthetic corpus kind \"" + std::string(s) + "\"");
}

std::string_view to_string(SynthKind k) {
  return k == SynthKind::markov_bytes ? "markov_bytes" : "repeated_patterns";
}

namespace {

constexpr std::int32_t kAlphabetBase = 32;
constexpr std::size_t kAlphabet = 64;

std::vector<std::int32_t> markov_stream(std::size_t size, std::uint64_t seed) {
  constexpr std::size_t kSuccessors = 4;
  detail::Rng table_rng(detail::mix_seed(seed, 1));
  // For each state (a, b): kSuccessors candidate symbols with a cumulative distribution.
  std::vector<std::uint8_t> succ(kAlphabet * kAlphabet * kSuccessors);
  std::vector<double> cdf(kAlphabet * kAlphabet * kSuccessors);
  for (std::size_t s = 0; s < kAlphabet * kAlphabet; ++s) {
    double w[kSuccessors], z = 0.0;
    for (std::size_t k = 0; k < kSuccessors; ++k) {
      succ[s * kSuccessors + k] = static_cast<std::uint8_t>(table_rng.below(kAlphabet));
      double e;
      do {
        e = -std::log(1.0 - table_rng.uniform());
      } while (!(e > 0.0));
      w[k] = e * e;  // sharper than Dirichlet(1)
      z += w[k];
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < kSuccessors; ++k) {
      acc += w[k] / z;
      cdf[s * kSuccessors + k] = acc;
    }
  }
  detail::Rng rng(detail::mix_seed(seed, 2));
  std::vector<std::int32_t> out(size);
  std::size_t a = 0, b = 1;
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t s = a * kAlphabet + b;
    const double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < kSuccessors && u >= cdf[s * kSuccessors + k]) ++k;
    const std::size_t c = succ[s * kSuccessors + k];
    out[i] = kAlphabetBase + static_cast<std::int32_t>(c);
    a = b;
    b = c;
  }
  return out;
}

std::vector<std::int32_t> pattern_stream(std::size_t size, std::uint64_t seed) {
  constexpr std::size_t kPatterns = 32, kMinLen = 8, kMaxLen = 24;
  constexpr double kNoise = 0.1;
  detail::Rng rng(detail::mix_seed(seed, 3));
  std::vector<std::vector<std::int32_t>> bank(kPatterns);
  for (auto& p : bank) {
    p.resize(kMinLen + rng.below(kMaxLen - kMinLen + 1));
    for (auto& c : p) c = kAlphabetBase + static_cast<std::int32_t>(rng.below(kAlphabet));
  }
  std::vector<std::int32_t> out;
  out.reserve(size);
  while (out.size() < size) {
    const auto& p = bank[rng.below(kPatterns)];
    for (auto c : p) {
      if (out.size() == size) break;
      if (rng.uniform() < kNoise) {
        out.push_back(static_cast<std::int32_t>(rng.below(256)));
        if (out.size() == size) break;
      }
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace

TokenCorpus synth_corpus(SynthKind kind, std::size_t size, std::uint64_t seed, double validation_fraction) {
  if (size < 2) throw ContractError("synthetic corpus needs at least two tokens");
  TokenCorpus c;
  c.vocab_size = 256;
  c.tokens = kind == SynthKind::markov_bytes ? markov_stream(size, seed) : pattern_stream(size, seed);
  c.split(validation_fraction);
  return c;
}

// ---- batches ---------------------------------------------------------------

std::size_t window_count(std::span<const std::int32_t> region, std::size_t seq_len) {
  if (seq_len == 0) throw ContractError("sequence length must be positive");
  return region.size() < seq_len + 1 ? 0 : (region.size() - 1) / seq_len;
}

TokenBatch window_batch(std::span<const std::int32_t> region, std::size_t seq_len,
                        std::span<const std::uint32_t> windows) {
  TokenBatch b;
  b.batch = windows.size();
  b.seq_len = seq_len;
  b.tokens.reserve(b.positions());
  b.targets.reserve(b.positions());
  const auto n = window_count(region, seq_len);
  for (auto w : windows) {
    if (w >= n) throw RangeError("window " + std::to_string(w) + " outside [0, " + std::to_string(n) + ")");
    const auto start = region.begin() + static_cast<std::ptrdiff_t>(std::size_t{w} * seq_len);
    b.tokens.insert(b.tokens.end(), start, start + static_cast<std::ptrdiff_t>(seq_len));
    b.targets.insert(b.targets.end(), start + 1, start + 1 + static_cast<std::ptrdiff_t>(seq_len));
  }
  return b;
}

BatchStream::BatchStream(std::span<const std::int32_t> region, std::size_t seq_len, std::size_t batch_size,
                         std::uint64_t seed)
    : region_(region), seq_len_(seq_len), batch_size_(batch_size), n_windows_(window_count(region, seq_len)),
      seed_(seed) {
  if (batch_size == 0) throw ContractError("batch size must be positive");
  if (n_windows_ == 0) {
    throw ContractError("corpus region of " + std::to_string(region.size()) + " tokens is shorter than one window of " +
                        std::to_string(seq_len + 1));
  }
}

std::vector<std::uint32_t> BatchStream::epoch_order(std::uint64_t epoch) const {
  std::vector<std::uint32_t> order(n_windows_);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::uint32_t>(i);
  detail::Rng rng(detail::mix_seed(seed_, 1000 + epoch));
  rng.shuffle(order);
  return order;
}

void BatchStream::seek(std::uint64_t cursor) { cursor_ = cursor; }

TokenBatch BatchStream::next() {
  std::vector<std::uint32_t> picks(batch_size_);
  for (auto& w : picks) {
    const auto e = cursor_ / n_windows_;
    if (e != cached_epoch_) {
      if (e > 0) spdlog::info("batch stream: epoch {} begins (cursor {})", e, cursor_);
      order_ = epoch_order(e);
      cached_epoch_ = e;
    }
    w = order_[cursor_ % n_windows_];
    ++cursor_;
  }
  return window_batch(region_, seq_len_, picks);
}

TokenBatch probe_batch(const TokenCorpus& corpus, std::size_t seq_len, std::size_t n, std::uint64_t seed) {
  const auto region = corpus.validation();
  const auto available = window_count(region, seq_len);
  if (available == 0) throw ContractError("validation split is shorter than one window");
  std::vector<std::uint32_t> all(available);
  for (std::size_t i = 0; i < available; ++i) all[i] = static_cast<std::uint32_t>(i);
  detail::Rng rng(detail::mix_seed(seed, 77));
  rng.shuffle(all);
  all.resize(std::min(n, available));
  std::sort(all.begin(), all.end());
  return window_batch(region, seq_len, all);
}

std::vector<TokenBatch> validation_batches(const TokenCorpus& corpus, std::size_t seq_len, std::size_t n_windows,
                                           std::size_t batch_size) {
  const auto region = corpus.validation();
  const auto available = std::min(n_windows, window_count(region, seq_len));
  if (available == 0) throw ContractError("validation split is shorter than one window");
  if (batch_size == 0) throw ContractError("batch size must be positive");
  std::vector<TokenBatch> out;
  for (std::size_t start = 0; start < available; start += batch_size) {
    std::vector<std::uint32_t> ws;
    for (std::size_t w = start; w < std::min(available, start + batch_size); ++w) {
      ws.push_back(static_cast<std::uint32_t>(w));
    }
    out.push_back(window_batch(region, seq_len, ws));
  }
  return out;
}

// ---- traces ----------------------------------------------------------------

void write_trace(const std::filesystem::path& path, const HiddenTrace& trace) {
  trace.validate();
  const std::size_t rows = trace.rows(), width = trace.width();
  detail::ByteWriter w;
  w.bytes(kTraceMagic);
  w.u32(kTraceVersion);
  w.u32(static_cast<std::uint32_t>(trace.n_layers()));
  w.u32(static_cast<std::uint32_t>(width));
  w.u64(trace.positions());
  for (const auto& state : trace.states) {
    const auto v = state.data();
    for (std::size_t r = 0; r < rows; ++r) {
      if (!trace.is_real(r)) continue;
      for (std::size_t j = 0; j < width; ++j) w.f32(static_cast<float>(v[r * width + j]));
    }
  }
  w.write_file(path);
}

HiddenTrace read_trace(const std::filesystem::path& path) {
  auto r = detail::ByteReader::from_file(path);
  r.expect_magic(kTraceMagic, "hidden-state trace");
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kTraceVersion) throw FormatError("unsupported trace version " + std::to_string(version), version_at);
  const auto header_at = r.offset();
  const std::uint64_t n_layers = r.u32("L"), width = r.u32("D");
  const std::uint64_t n_positions = r.u64("n_positions");
  if (n_layers == 0 || width == 0 || n_positions == 0) {
    throw FormatError("trace header declares an empty trace", header_at);
  }
  const std::uint64_t expected = (n_layers + 1) * n_positions * width * 4;
  if (expected != r.remaining()) {
    throw FormatError("trace payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
                          std::to_string(expected),
                      r.offset());
  }
  HiddenTrace trace;
  for (std::uint64_t l = 0; l <= n_layers; ++l) {
    std::vector<double> v(n_positions * width);
    for (auto& x : v) x = static_cast<double>(r.f32("trace value"));
    trace.states.push_back(Tensor::from({n_positions, width}, std::move(v)));
  }
  return trace;
}

// ---- reports ---------------------------------------------------------------

ReportFormat parse_report_format(std::string_view s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw ContractError("unknown report format \"" + std::string(s) + "\" (expected csv or json)");
}

ReportFormat format_for_path(const std::filesystem::path& path) {
  return path.extension() == ".json" ? ReportFormat::json : ReportFormat::csv;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string render_report(const ReportTable& table, ReportFormat format) {
  for (const auto& row : table.rows) {
    if (row.size() != table.columns.size()) throw ContractError("report row width does not match its header");
  }
  if (format == ReportFormat::csv) {
    std::string out;
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      if (c) out += ',';
      out += table.columns[c].name;
    }
    out += '\n';
    for (const auto& row : table.rows) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (c) out += ',';
        out += table.columns[c].integer ? std::to_string(static_cast<long long>(row[c])) : format_number(row[c]);
      }
      out += '\n';
    }
    return out;
  }
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& row : table.rows) {
    nlohmann::json obj = nlohmann::json::object();
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (table.columns[c].integer) {
        obj[table.columns[c].name] = static_cast<long long>(row[c]);
      } else {
        obj[table.columns[c].name] = row[c];
      }
    }
    arr.push_back(std::move(obj));
  }
  return arr.dump(2) + "\n";
}

void write_report(const ReportTable& table, const std::filesystem::path& path, ReportFormat format) {
  const auto text = render_report(table, format);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void write_report(const ReportTable& table, const std::filesystem::path& path) {
  write_report(table, path, format_for_path(path));
}

namespace {

double parse_double(std::string_view s, const std::filesystem::path& path, std::size_t line) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw FormatError("cannot parse number \"" + std::string(s) + "\" in " + path.string() + " line " +
                          std::to_string(line),
                      0);
  }
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

}  // namespace

ReportTable read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  ReportTable t;
  if (format_for_path(path) == ReportFormat::json) {
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("invalid JSON report: ") + e.what(), 0);
    }
    if (!j.is_array()) throw FormatError("JSON report must be an array of rows", 0);
    for (const auto& row : j) {
      if (!row.is_object()) throw FormatError("JSON report rows must be objects", 0);
      if (t.columns.empty()) {
        for (auto it = row.begin(); it != row.end(); ++it) t.columns.push_back({it.key(), it.value().is_number_integer()});
      }
      std::vector<double> vals;
      for (const auto& col : t.columns) {
        if (!row.contains(col.name)) throw FormatError("JSON report row lacks column " + col.name, 0);
        const auto& v = row.at(col.name);
        vals.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
      }
      t.rows.push_back(std::move(vals));
    }
    return t;
  }
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty CSV report " + path.string(), 0);
  for (auto& name : split_csv(line)) t.columns.push_back({name, false});
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv(line);
    if (cells.size() != t.columns.size()) {
      throw FormatError("CSV row " + std::to_string(line_no) + " of " + path.string() + " has " +
                            std::to_string(cells.size()) + " cells, header has " + std::to_string(t.columns.size()),
                        0);
    }
    std::vector<double> vals;
    for (const auto& c : cells) vals.push_back(parse_double(c, path, line_no));
    t.rows.push_back(std::move(vals));
  }
  return t;
}

ReportTable profile_table(const DisplacementProfile& profile) {
  ReportTable t{{{"layer", true}, {"psi", false}}, {}};
  for (std::size_t l = 1; l <= profile.n_layers(); ++l) t.rows.push_back({static_cast<double>(l), profile.psi(l)});
  return t;
}

ReportTable jump_table(const JumpReport& report) {
  ReportTable t{{{"ell", true}, {"zeta", false}}, {}};
  for (const auto& [ell, z] : report.zeta) t.rows.push_back({static_cast<double>(ell), z});
  return t;
}

ReportTable delta_table(const DisplacementProfile& a, const DisplacementProfile& b) {
  const auto delta = redundancy_delta(a, b);
  ReportTable t{{{"layer", true}, {"psi_a", false}, {"psi_b", false}, {"delta", false}}, {}};
  for (std::size_t l = 1; l <= delta.size(); ++l) {
    t.rows.push_back({static_cast<double>(l), a.psi(l), b.psi(l), delta[l - 1]});
  }
  return t;
}

DisplacementProfile profile_from_table(const ReportTable& table) {
  std::size_t layer_col = SIZE_MAX, psi_col = SIZE_MAX;
  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    if (table.columns[c].name == "layer") layer_col = c;
    if (table.columns[c].name == "psi") psi_col = c;
  }
  if (layer_col == SIZE_MAX || psi_col == SIZE_MAX) throw FormatError("profile report needs layer and psi columns", 0);
  DisplacementProfile p;
  p.values.assign(table.rows.size(), 0.0);
  std::vector<bool> seen(table.rows.size(), false);
  for (const auto& row : table.rows) {
    const double layer = row[layer_col];
    if (layer < 1 || layer > static_cast<double>(table.rows.size()) || layer != std::floor(layer)) {
      throw FormatError("profile report layer index " + format_number(layer) + " out of range", 0);
    }
    const auto idx = static_cast<std::size_t>(layer) - 1;
    if (seen[idx]) throw FormatError("profile report repeats layer " + format_number(layer), 0);
    seen[idx] = true;
    p.values[idx] = row[psi_col];
  }
  if (p.values.empty()) throw FormatError("profile report has no rows", 0);
  return p;
}

DisplacementProfile read_profile(const std::filesystem::path& path) { return profile_from_table(read_report(path)); }

}  // namespace jreg
