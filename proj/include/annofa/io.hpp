#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "evaluation.hpp"
#include "model.hpp"
#include "synthetic.hpp"
#include "types.hpp"

namespace annofa {

// ---------------------------------------------------------------------------
// Gene sets (GMT)
// ---------------------------------------------------------------------------

struct GeneSet {
  std::string name;
  std::string description;
  std::vector<std::string> members;  // unique, in file order
};

struct GeneSetCollection {
  std::vector<GeneSet> sets;
};

namespace detail {

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  return out;
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Tab-separated lines: name, description, member...
inline GeneSetCollection parse_gmt(std::istream& in, const std::string& source = "<gmt>") {
  GeneSetCollection out;
  std::unordered_set<std::string> names;
  std::string raw;
  long line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = detail::strip_cr(raw);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    const auto fields = detail::split(line, '\t');
    if (fields.size() < 3)
      throw ParseError(source + ":" + std::to_string(line_no) + ": expected name, description and members");
    GeneSet set;
    set.name = std::string(fields[0]);
    set.description = std::string(fields[1]);
    if (set.name.empty()) throw ParseError(source + ":" + std::to_string(line_no) + ": empty set name");
    std::unordered_set<std::string_view> seen;
    for (std::size_t i = 2; i < fields.size(); ++i) {
      if (fields[i].empty()) continue;
      if (seen.insert(fields[i]).second) set.members.emplace_back(fields[i]);
    }
    if (set.members.empty())
      throw ParseError(source + ":" + std::to_string(line_no) + ": set '" + set.name + "' has no members");
    if (!names.insert(set.name).second)
      throw ParseError(source + ":" + std::to_string(line_no) + ": duplicate set name '" + set.name + "'");
    out.sets.push_back(std::move(set));
  }
  return out;
}

inline GeneSetCollection read_gmt(const std::string& path) {
  auto in = detail::open_in(path);
  return parse_gmt(in, path);
}

inline void write_gmt(const GeneSetCollection& sets, std::ostream& out) {
  for (const auto& s : sets.sets) {
    out << s.name << '\t' << s.description;
    for (const auto& m : s.members) out << '\t' << m;
    out << '\n';
  }
}

inline void write_gmt(const GeneSetCollection& sets, const std::string& path) {
  auto out = detail::open_out(path);
  write_gmt(sets, out);
}

/// One annotated column per set with at least min_genes members among
/// feature_names (collection order kept), then n_sparse all-false and
/// n_dense all-true columns.
inline AnnotationMask build_mask(const GeneSetCollection& sets, const std::vector<std::string>& feature_names,
                                 Index min_genes = 15, Index n_sparse = 0, Index n_dense = 0) {
  if (feature_names.empty()) throw ConfigError("build_mask: no feature names");
  std::unordered_map<std::string, Index> where;
  for (std::size_t g = 0; g < feature_names.size(); ++g) where.emplace(feature_names[g], static_cast<Index>(g));

  AnnotationMask mask;
  const auto G = static_cast<Index>(feature_names.size());
  std::vector<std::vector<Index>> columns;
  for (const auto& s : sets.sets) {
    std::vector<Index> hits;
    for (const auto& m : s.members)
      if (auto it = where.find(m); it != where.end()) hits.push_back(it->second);
    if (static_cast<Index>(hits.size()) < min_genes || hits.empty()) continue;
    columns.push_back(std::move(hits));
    mask.factor_names.push_back(s.name);
    mask.kinds.push_back(FactorKind::annotated);
  }
  if (columns.empty())
    throw ConfigError("build_mask: no gene set has at least " + std::to_string(min_genes) +
                      " members present in the data");
  mask.active = BoolMatrix::Constant(G, static_cast<Index>(columns.size()), false);
  for (std::size_t k = 0; k < columns.size(); ++k)
    for (Index g : columns[k]) mask.active(g, static_cast<Index>(k)) = true;
  return append_unannotated(mask, n_sparse, n_dense);
}

/// Gene sets of the learned activity pattern (|w| > threshold) per factor.
inline GeneSetCollection refined_gene_sets(const TrainedModel& model, const std::vector<std::string>& feature_names,
                                           double threshold = 0.1) {
  require_shape(static_cast<Index>(feature_names.size()) == model.n_features(),
                "refined_gene_sets: feature names do not match model");
  GeneSetCollection out;
  const auto refined = refined_annotations(model, threshold);
  for (Index k = 0; k < model.n_factors(); ++k) {
    GeneSet s;
    s.name = refined[k].name.empty() ? "factor_" + std::to_string(k + 1) : refined[k].name;
    s.description = "added=" + std::to_string(refined[k].added.size()) +
                    ";removed=" + std::to_string(refined[k].removed.size());
    for (Index g = 0; g < model.n_features(); ++g)
      if (std::abs(model.w_mean(g, k)) > threshold) s.members.push_back(feature_names[g]);
    if (!s.members.empty()) out.sets.push_back(std::move(s));
  }
  return out;
}

/// Active pattern of a mask as gene sets, one per non-empty column.
inline GeneSetCollection mask_to_gene_sets(const AnnotationMask& mask, const std::vector<std::string>& feature_names) {
  GeneSetCollection out;
  for (Index k = 0; k < mask.n_factors(); ++k) {
    GeneSet s;
    s.name = mask.factor_names[k];
    s.description = to_string(mask.kinds[k]);
    for (Index g = 0; g < mask.n_features(); ++g)
      if (mask.active(g, k)) s.members.push_back(feature_names[g]);
    if (!s.members.empty()) out.sets.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

enum class MatrixFormat { csv, matrix_market };

namespace detail {

inline bool is_missing(std::string_view s) { return s.empty() || s == "NA"; }

inline double parse_number(std::string_view s, const std::string& where) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ParseError(where + ": not a number: '" + std::string(s) + "'");
  if (!std::isfinite(v)) throw ParseError(where + ": non-finite value '" + std::string(s) + "'");
  return v;
}

}  // namespace detail

/// Comma-separated, header row of feature names (leading cell is the
/// sample-name column label), first column sample names. Empty cells and
/// "NA" are missing.
inline ExpressionMatrix parse_csv_matrix(std::istream& in, const std::string& source = "<csv>") {
  std::string raw;
  if (!std::getline(in, raw)) throw ParseError(source + ": empty file");
  auto header = detail::split(detail::strip_cr(raw), ',');
  if (header.size() < 2) throw ParseError(source + ":1: header needs at least one feature column");
  ExpressionMatrix y;
  for (std::size_t c = 1; c < header.size(); ++c) y.feature_names.emplace_back(header[c]);
  const std::size_t G = y.feature_names.size();

  std::vector<double> values;
  std::vector<char> obs;
  long line_no = 1;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = detail::strip_cr(raw);
    if (line.empty()) continue;
    const auto cells = detail::split(line, ',');
    const std::string where = source + ":" + std::to_string(line_no);
    if (cells.size() != G + 1)
      throw ParseError(where + ": expected " + std::to_string(G + 1) + " fields, found " + std::to_string(cells.size()));
    y.sample_names.emplace_back(cells[0]);
    for (std::size_t c = 1; c <= G; ++c) {
      if (detail::is_missing(cells[c])) {
        values.push_back(0.0);
        obs.push_back(0);
      } else {
        values.push_back(detail::parse_number(cells[c], where));
        obs.push_back(1);
      }
    }
  }
  const auto N = static_cast<Index>(y.sample_names.size());
  if (N == 0) throw ParseError(source + ": no data rows");
  y.data.resize(N, static_cast<Index>(G));
  y.observed.resize(N, static_cast<Index>(G));
  for (Index i = 0; i < N; ++i)
    for (Index g = 0; g < static_cast<Index>(G); ++g) {
      const auto at = static_cast<std::size_t>(i) * G + static_cast<std::size_t>(g);
      y.data(i, g) = values[at];
      y.observed(i, g) = obs[at] != 0;
    }
  return y;
}

inline void write_csv_matrix(const ExpressionMatrix& y, std::ostream& out, const std::string& corner = "sample") {
  out << corner;
  for (const auto& f : y.feature_names) out << ',' << f;
  out << '\n';
  const bool has_mask = y.observed.size() != 0;
  for (Index i = 0; i < y.n_samples(); ++i) {
    out << y.sample_names[i];
    for (Index g = 0; g < y.n_features(); ++g) {
      out << ',';
      if (!has_mask || y.observed(i, g)) out << detail::fmt_double(y.data(i, g));
      else out << "NA";
    }
    out << '\n';
  }
}

inline void write_csv_matrix(const ExpressionMatrix& y, const std::string& path, const std::string& corner = "sample") {
  auto out = detail::open_out(path);
  write_csv_matrix(y, out, corner);
}

/// Labeled dense matrix (rows x cols) as CSV.
inline void write_csv_table(const Matrix& m, const std::vector<std::string>& row_names,
                            const std::vector<std::string>& col_names, const std::string& path,
                            const std::string& corner = "") {
  ExpressionMatrix e;
  e.data = m;
  e.sample_names = row_names;
  e.feature_names = col_names;
  write_csv_matrix(e, path, corner);
}

/// MatrixMarket `matrix coordinate|array real|integer|pattern general|symmetric`.
/// Coordinate entries not listed are observed zeros.
inline ExpressionMatrix parse_matrix_market(std::istream& in, const std::string& source = "<mtx>") {
  std::string raw;
  if (!std::getline(in, raw)) throw ParseError(source + ": empty file");
  std::istringstream hs(raw);
  std::string banner, object, layout, field, symmetry;
  hs >> banner >> object >> layout >> field >> symmetry;
  auto lower = [](std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
  };
  object = lower(object);
  layout = lower(layout);
  field = lower(field);
  symmetry = lower(symmetry);
  if (banner != "%%MatrixMarket" || object != "matrix") throw ParseError(source + ":1: not a MatrixMarket matrix");
  if (layout != "coordinate" && layout != "array") throw ParseError(source + ":1: unsupported layout '" + layout + "'");
  if (field != "real" && field != "integer" && field != "double" && field != "pattern")
    throw ParseError(source + ":1: unsupported field '" + field + "'");
  if (symmetry != "general" && symmetry != "symmetric")
    throw ParseError(source + ":1: unsupported symmetry '" + symmetry + "'");
  const bool pattern = field == "pattern", symmetric = symmetry == "symmetric";
  if (pattern && layout == "array") throw ParseError(source + ":1: pattern requires coordinate layout");

  long line_no = 1;
  auto next_data_line = [&](std::string& out) {
    while (std::getline(in, out)) {
      ++line_no;
      const auto s = detail::strip_cr(out);
      if (s.empty() || s.front() == '%') continue;
      out = std::string(s);
      return true;
    }
    return false;
  };
  std::string line;
  if (!next_data_line(line)) throw ParseError(source + ": missing size line");
  std::istringstream sz(line);
  long rows = 0, cols = 0, nnz = 0;
  sz >> rows >> cols;
  if (layout == "coordinate") sz >> nnz;
  if (!sz || rows < 1 || cols < 1 || nnz < 0) throw ParseError(source + ":" + std::to_string(line_no) + ": bad size line");
  if (symmetric && rows != cols) throw ParseError(source + ": symmetric matrix must be square");

  ExpressionMatrix y;
  y.data = Matrix::Zero(rows, cols);
  y.observed = BoolMatrix::Constant(rows, cols, true);
  if (layout == "coordinate") {
    for (long e = 0; e < nnz; ++e) {
      if (!next_data_line(line)) throw ParseError(source + ": expected " + std::to_string(nnz) + " entries");
      const auto where = source + ":" + std::to_string(line_no);
      std::istringstream es(line);
      std::string si, sj, sv;
      es >> si >> sj >> sv;
      const double di = detail::parse_number(si, where), dj = detail::parse_number(sj, where);
      const long i = static_cast<long>(di), j = static_cast<long>(dj);
      if (i != di || j != dj || i < 1 || i > rows || j < 1 || j > cols) throw ParseError(where + ": index out of range");
      const double v = pattern ? 1.0 : detail::parse_number(sv, where);
      y.data(i - 1, j - 1) = v;
      if (symmetric) y.data(j - 1, i - 1) = v;
    }
  } else {
    // Column-major; symmetric stores the lower triangle.
    for (long j = 0; j < cols; ++j)
      for (long i = symmetric ? j : 0; i < rows; ++i) {
        if (!next_data_line(line)) throw ParseError(source + ": too few array entries");
        const double v = detail::parse_number(line, source + ":" + std::to_string(line_no));
        y.data(i, j) = v;
        if (symmetric) y.data(j, i) = v;
      }
  }
  if (next_data_line(line)) throw ParseError(source + ":" + std::to_string(line_no) + ": trailing data");
  for (long i = 0; i < rows; ++i) y.sample_names.push_back("s" + std::to_string(i));
  for (long j = 0; j < cols; ++j) y.feature_names.push_back("g" + std::to_string(j));
  return y;
}

/// Coordinate format, one entry per nonzero observed value.
inline void write_matrix_market(const ExpressionMatrix& y, std::ostream& out) {
  if (!y.fully_observed()) throw ConfigError("write_matrix_market: format cannot represent missing entries");
  long nnz = 0;
  for (Index j = 0; j < y.n_features(); ++j)
    for (Index i = 0; i < y.n_samples(); ++i) nnz += y.data(i, j) != 0.0;
  out << "%%MatrixMarket matrix coordinate real general\n";
  out << y.n_samples() << ' ' << y.n_features() << ' ' << nnz << '\n';
  for (Index j = 0; j < y.n_features(); ++j)
    for (Index i = 0; i < y.n_samples(); ++i)
      if (y.data(i, j) != 0.0) out << i + 1 << ' ' << j + 1 << ' ' << detail::fmt_double(y.data(i, j)) << '\n';
}

inline void write_matrix_market(const ExpressionMatrix& y, const std::string& path) {
  auto out = detail::open_out(path);
  write_matrix_market(y, out);
}

inline MatrixFormat guess_format(const std::string& path) {
  const auto dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  return (ext == "mtx" || ext == "mm") ? MatrixFormat::matrix_market : MatrixFormat::csv;
}

inline ExpressionMatrix read_matrix(const std::string& path, MatrixFormat format) {
  auto in = detail::open_in(path);
  return format == MatrixFormat::csv ? parse_csv_matrix(in, path) : parse_matrix_market(in, path);
}

inline ExpressionMatrix read_matrix(const std::string& path) { return read_matrix(path, guess_format(path)); }

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

struct StandardizeResult {
  ExpressionMatrix y;
  std::vector<std::string> dropped;  // constant features
};

/// Per feature: subtract the observed mean, divide by the observed sample
/// standard deviation (denominator n-1). Constant features are dropped.
inline StandardizeResult standardize(const ExpressionMatrix& y) {
  const Index N = y.n_samples(), G = y.n_features();
  const bool full = y.fully_observed();
  std::vector<Index> keep;
  StandardizeResult out;
  Vector mean(G), sd(G);
  for (Index g = 0; g < G; ++g) {
    double sum = 0.0;
    Index n = 0;
    for (Index i = 0; i < N; ++i)
      if (full || y.observed(i, g)) {
        sum += y.data(i, g);
        ++n;
      }
    const std::string name = g < static_cast<Index>(y.feature_names.size()) ? y.feature_names[g] : std::to_string(g);
    if (n < 2) throw DomainError("standardize: feature '" + name + "' has fewer than 2 observed values");
    const double m = sum / static_cast<double>(n);
    double ss = 0.0;
    for (Index i = 0; i < N; ++i)
      if (full || y.observed(i, g)) ss += (y.data(i, g) - m) * (y.data(i, g) - m);
    mean[g] = m;
    sd[g] = std::sqrt(ss / static_cast<double>(n - 1));
    if (sd[g] > 0.0) keep.push_back(g);
    else out.dropped.push_back(name);
  }
  if (keep.empty()) throw DomainError("standardize: every feature is constant");
  auto& r = out.y;
  r.sample_names = y.sample_names;
  r.data.resize(N, static_cast<Index>(keep.size()));
  r.observed.resize(N, static_cast<Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const Index g = keep[j];
    if (g < static_cast<Index>(y.feature_names.size())) r.feature_names.push_back(y.feature_names[g]);
    for (Index i = 0; i < N; ++i) {
      const bool o = full || y.observed(i, g);
      r.observed(i, static_cast<Index>(j)) = o;
      r.data(i, static_cast<Index>(j)) = o ? (y.data(i, g) - mean[g]) / sd[g] : 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model archive
// ---------------------------------------------------------------------------

inline constexpr int kModelFormatVersion = 1;

namespace detail {

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += tbl[v & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? tbl[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (s.size() % 4 != 0) throw ParseError("base64: length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      if (s[i + j] == '=' && i + 4 == s.size() && j >= 2) {
        v[j] = 0;
        ++pad;
      } else if ((v[j] = val(s[i + j])) < 0 || pad > 0) {
        throw ParseError("base64: invalid character");
      }
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(w >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w));
  }
  return out;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Column-major little-endian float64.
inline nlohmann::json encode_array(const Matrix& m) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(static_cast<std::size_t>(m.size()) * 8);
  for (Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, m.data() + i, 8);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
  }
  return {{"shape", {m.rows(), m.cols()}}, {"dtype", "<f8"}, {"data", base64_encode(bytes)}};
}

inline Matrix decode_array(const nlohmann::json& j, const char* name) {
  const Index rows = j.at("shape").at(0).get<Index>(), cols = j.at("shape").at(1).get<Index>();
  if (j.at("dtype").get<std::string>() != "<f8") throw ParseError(std::string("model archive: ") + name + ": bad dtype");
  const auto bytes = base64_decode(j.at("data").get<std::string>());
  if (rows < 0 || cols < 0 || bytes.size() != static_cast<std::size_t>(rows * cols) * 8)
    throw ParseError(std::string("model archive: ") + name + ": data length does not match shape");
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i) * 8 + b]) << (8 * b);
    std::memcpy(m.data() + i, &bits, 8);
  }
  return m;
}

inline nlohmann::json encode_mask(const BoolMatrix& m) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.size(); ++i) bytes[static_cast<std::size_t>(i)] = m.data()[i] ? 1 : 0;
  return {{"shape", {m.rows(), m.cols()}}, {"dtype", "u1"}, {"data", base64_encode(bytes)}};
}

inline BoolMatrix decode_mask(const nlohmann::json& j) {
  const Index rows = j.at("shape").at(0).get<Index>(), cols = j.at("shape").at(1).get<Index>();
  const auto bytes = base64_decode(j.at("data").get<std::string>());
  if (rows < 0 || cols < 0 || bytes.size() != static_cast<std::size_t>(rows * cols))
    throw ParseError("model archive: mask data length does not match shape");
  BoolMatrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = bytes[static_cast<std::size_t>(i)] != 0;
  return m;
}

inline nlohmann::json payload_of(const TrainedModel& model) {
  using nlohmann::json;
  const auto& c = model.config;
  json config = {{"n_annotated", c.n_annotated},
                 {"n_sparse_unannotated", c.n_sparse_unannotated},
                 {"n_dense_unannotated", c.n_dense_unannotated},
                 {"slab_annotated", c.slab_annotated},
                 {"slab_unannotated", c.slab_unannotated},
                 {"tau0", c.tau0},
                 {"noise_prior_shape", c.noise_prior_shape},
                 {"noise_prior_rate", c.noise_prior_rate}};
  json kinds = json::array();
  for (auto k : model.mask.kinds) kinds.push_back(to_string(k));
  json mask = {{"active", encode_mask(model.mask.active)}, {"kinds", kinds}, {"factor_names", model.mask.factor_names}};
  Matrix sigma2 = model.sigma2;
  Matrix tau(1, 1);
  tau(0, 0) = model.tau_mean;
  json posterior = {{"w_mean", encode_array(model.w_mean)}, {"w_scale", encode_array(model.w_scale)},
                    {"x_mean", encode_array(model.x_mean)}, {"x_scale", encode_array(model.x_scale)},
                    {"sigma2", encode_array(sigma2)},       {"tau_mean", encode_array(tau)}};
  json checkpoints = json::array();
  for (const auto& cp : model.trace.checkpoints) {
    Matrix vals(2, 1);
    vals << cp.elbo, cp.seconds;
    json e = {{"iteration", cp.iteration}, {"values", encode_array(vals)}};
    if (cp.f1) {
      Matrix f(1 + static_cast<Index>(cp.factor_f1.size()), 1);
      f(0, 0) = *cp.f1;
      for (std::size_t i = 0; i < cp.factor_f1.size(); ++i) f(static_cast<Index>(i) + 1, 0) = cp.factor_f1[i];
      e["f1"] = encode_array(f);
    }
    checkpoints.push_back(std::move(e));
  }
  json trace = {{"converged", model.trace.converged}, {"checkpoints", checkpoints}};
  return {{"format_version", kModelFormatVersion}, {"config", config}, {"mask", mask},
          {"posterior", posterior},                {"trace", trace}};
}

}  // namespace detail

/// Versioned JSON archive; arrays are base64 little-endian float64 so a
/// round trip is bit-exact. The checksum covers the canonical serialization
/// of every other top-level field.
inline std::string serialize_model(const TrainedModel& model) {
  auto doc = detail::payload_of(model);
  doc["checksum"] = "fnv1a64:" + detail::hex64(detail::fnv1a64(doc.dump()));
  return doc.dump(1);
}

inline TrainedModel deserialize_model(const std::string& text) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("model archive: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("format_version") || !doc["format_version"].is_number_integer())
    throw VersionError("model archive: missing format_version");
  const int version = doc["format_version"].get<int>();
  if (version != kModelFormatVersion)
    throw VersionError("model archive: format_version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kModelFormatVersion) + ")");
  if (!doc.contains("checksum") || !doc["checksum"].is_string()) throw ChecksumError("model archive: missing checksum");
  const std::string stored = doc["checksum"].get<std::string>();
  doc.erase("checksum");
  const std::string expected = "fnv1a64:" + detail::hex64(detail::fnv1a64(doc.dump()));
  if (stored != expected) throw ChecksumError("model archive: checksum mismatch");

  TrainedModel m;
  try {
    const auto& c = doc.at("config");
    m.config.n_annotated = c.at("n_annotated").get<Index>();
    m.config.n_sparse_unannotated = c.at("n_sparse_unannotated").get<Index>();
    m.config.n_dense_unannotated = c.at("n_dense_unannotated").get<Index>();
    m.config.slab_annotated = c.at("slab_annotated").get<double>();
    m.config.slab_unannotated = c.at("slab_unannotated").get<double>();
    m.config.tau0 = c.at("tau0").get<double>();
    m.config.noise_prior_shape = c.at("noise_prior_shape").get<double>();
    m.config.noise_prior_rate = c.at("noise_prior_rate").get<double>();

    const auto& mk = doc.at("mask");
    m.mask.active = detail::decode_mask(mk.at("active"));
    for (const auto& k : mk.at("kinds")) m.mask.kinds.push_back(factor_kind_from_string(k.get<std::string>()));
    m.mask.factor_names = mk.at("factor_names").get<std::vector<std::string>>();

    const auto& p = doc.at("posterior");
    m.w_mean = detail::decode_array(p.at("w_mean"), "w_mean");
    m.w_scale = detail::decode_array(p.at("w_scale"), "w_scale");
    m.x_mean = detail::decode_array(p.at("x_mean"), "x_mean");
    m.x_scale = detail::decode_array(p.at("x_scale"), "x_scale");
    m.sigma2 = detail::decode_array(p.at("sigma2"), "sigma2").col(0);
    m.tau_mean = detail::decode_array(p.at("tau_mean"), "tau_mean")(0, 0);

    const auto& t = doc.at("trace");
    m.trace.converged = t.at("converged").get<bool>();
    for (const auto& e : t.at("checkpoints")) {
      Checkpoint cp;
      cp.iteration = e.at("iteration").get<long>();
      const Matrix vals = detail::decode_array(e.at("values"), "trace");
      if (vals.size() != 2) throw ParseError("model archive: bad trace record");
      cp.elbo = vals(0, 0);
      cp.seconds = vals(1, 0);
      if (e.contains("f1")) {
        const Matrix f = detail::decode_array(e.at("f1"), "trace f1");
        if (f.size() < 1) throw ParseError("model archive: bad f1 record");
        cp.f1 = f(0, 0);
        for (Index i = 1; i < f.size(); ++i) cp.factor_f1.push_back(f(i, 0));
      }
      m.trace.checkpoints.push_back(std::move(cp));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("model archive: ") + e.what());
  }
  if (auto v = validate(m); !v.empty()) throw ParseError("model archive: invalid model\n" + format_violations(v));
  return m;
}

inline void save_model(const TrainedModel& model, const std::string& path) {
  auto out = detail::open_out(path);
  out << serialize_model(model) << '\n';
  if (!out) throw Error("save_model: write to '" + path + "' failed");
}

inline TrainedModel load_model(const std::string& path) {
  auto in = detail::open_in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_model(ss.str());
}

// ---------------------------------------------------------------------------
// Tabular outputs
// ---------------------------------------------------------------------------

/// Wall-clock seconds are left out unless asked for, so identical runs give
/// identical files.
inline void write_trace_csv(const TrainingTrace& trace, std::ostream& out, bool with_seconds = false) {
  out << "iteration,elbo,f1" << (with_seconds ? ",seconds\n" : "\n");
  for (const auto& c : trace.checkpoints) {
    out << c.iteration << ',' << detail::fmt_double(c.elbo) << ',';
    if (c.f1) out << detail::fmt_double(*c.f1);
    if (with_seconds) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", c.seconds);
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline void write_trace_jsonl(const TrainingTrace& trace, std::ostream& out) {
  for (const auto& c : trace.checkpoints) write_checkpoint_record(out, c);
}

inline void write_factor_report(const std::vector<FactorReport>& reports, std::ostream& out) {
  out << "rank,index,name,kind,r2,n_active,top_weights\n";
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const auto& f = reports[r];
    out << r + 1 << ',' << f.index << ',' << f.name << ',' << to_string(f.kind) << ',' << detail::fmt_double(f.r2)
        << ',' << f.n_active << ',';
    for (std::size_t j = 0; j < f.top_weights.size(); ++j) {
      if (j) out << ';';
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6g", f.top_weights[j].second);
      out << f.top_weights[j].first << ':' << buf;
    }
    out << '\n';
  }
}

/// Long format: noise,redundant,iteration,f1,elbo.
inline void write_experiment_table(const ExperimentReport& report, std::ostream& out) {
  out << "noise,redundant,iteration,f1,elbo\n";
  for (const auto& cell : report.cells)
    for (const auto& c : cell.trace.checkpoints)
      out << detail::fmt_double(cell.noise) << ',' << detail::fmt_double(cell.redundant) << ',' << c.iteration << ','
          << (c.f1 ? detail::fmt_double(*c.f1) : "") << ',' << detail::fmt_double(c.elbo) << '\n';
}

inline void write_experiment_summary(const ExperimentReport& report, std::ostream& out) {
  out << "noise,redundant,mask_f1,final_f1,iterations,max_redundant_r2,min_true_r2\n";
  for (const auto& cell : report.cells) {
    double max_red = -std::numeric_limits<double>::infinity(), min_true = std::numeric_limits<double>::infinity();
    std::set<Index> red(cell.redundant_columns.begin(), cell.redundant_columns.end());
    const Index n_true = cell.redundant_columns.empty() ? static_cast<Index>(cell.factor_r2.size())
                                                        : cell.redundant_columns.front();
    for (Index k = 0; k < static_cast<Index>(cell.factor_r2.size()); ++k) {
      if (red.count(k)) max_red = std::max(max_red, cell.factor_r2[k]);
      else if (k < n_true) min_true = std::min(min_true, cell.factor_r2[k]);
    }
    out << detail::fmt_double(cell.noise) << ',' << detail::fmt_double(cell.redundant) << ','
        << detail::fmt_double(cell.mask_f1) << ',' << detail::fmt_double(cell.final_f1) << ','
        << (cell.trace.checkpoints.empty() ? 0 : cell.trace.checkpoints.back().iteration) << ','
        << (red.empty() ? std::string() : detail::fmt_double(max_red)) << ',' << detail::fmt_double(min_true) << '\n';
  }
}

}  // namespace annofa
