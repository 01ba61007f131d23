#pragma once
// Plain-text correspondence exchange format.
//
// Layout per record:
//   corrpairs v1 n=<N> gt=<0|1>
//   [3 lines: rows of R, 3 numbers each]   only when gt=1
//   [1 line: t, 3 numbers]                 only when gt=1
//   N lines: x y u v [label]
// Numbers print with 17 significant digits, which round-trips IEEE doubles
// exactly, so write -> load -> write is byte-identical. A stream may hold
// several records back to back; a path may also name a directory of
// .corrpairs files, loaded in sorted order.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "corrprune/common.hpp"
#include "corrprune/geometry.hpp"
#include "corrprune/scene.hpp"

namespace corrprune {

struct CorrRecord {
  std::vector<Correspondence> correspondences;
  std::vector<uint8_t> labels;  // meaningful only when has_labels
  bool has_labels = false;
  bool has_gt = false;  // pose metrics are unavailable when false
  RelativePose pose;    // valid only when has_gt
};

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf);
}

inline void write_corrpairs(std::ostream& os,
                            const std::vector<Correspondence>& c,
                            const RelativePose* pose,
                            const std::vector<uint8_t>* labels) {
  CP_CHECK(!c.empty(), "write_corrpairs: empty correspondence list");
  if (labels)
    CP_CHECK(labels->size() == c.size(),
             "write_corrpairs: label count does not match row count");
  os << "corrpairs v1 n=" << c.size() << " gt=" << (pose ? 1 : 0) << "\n";
  if (pose) {
    for (int r = 0; r < 3; ++r)
      os << fmt17(pose->rotation(r, 0)) << ' ' << fmt17(pose->rotation(r, 1))
         << ' ' << fmt17(pose->rotation(r, 2)) << "\n";
    os << fmt17(pose->translation[0]) << ' ' << fmt17(pose->translation[1])
       << ' ' << fmt17(pose->translation[2]) << "\n";
  }
  for (size_t i = 0; i < c.size(); ++i) {
    os << fmt17(c[i].x) << ' ' << fmt17(c[i].y) << ' ' << fmt17(c[i].u) << ' '
       << fmt17(c[i].v);
    if (labels) os << ' ' << int((*labels)[i] ? 1 : 0);
    os << "\n";
  }
}

namespace detail {

inline double parse_double_token(const std::string& tok, const char* what) {
  const char* begin = tok.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  CP_CHECK(end == begin + tok.size() && !tok.empty(),
           std::string("corrpairs: bad ") + what + " value: " + tok);
  return v;
}

inline std::vector<std::string> split_tokens(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> toks;
  std::string t;
  while (is >> t) toks.push_back(t);
  return toks;
}

inline std::string next_line(std::istream& is, const char* what) {
  std::string line;
  CP_CHECK(static_cast<bool>(std::getline(is, line)),
           std::string("corrpairs: unexpected end of stream reading ") + what);
  return line;
}

}  // namespace detail

inline CorrRecord parse_corrpairs_record(std::istream& is,
                                         const std::string& header) {
  const std::vector<std::string> h = detail::split_tokens(header);
  CP_CHECK(h.size() == 4 && h[0] == "corrpairs" && h[1] == "v1" &&
               h[2].rfind("n=", 0) == 0 && h[3].rfind("gt=", 0) == 0,
           "corrpairs: malformed header: " + header);
  const std::string ntok = h[2].substr(2);
  char* end = nullptr;
  const long long n = std::strtoll(ntok.c_str(), &end, 10);
  CP_CHECK(end == ntok.c_str() + ntok.size() && !ntok.empty() && n >= 1,
           "corrpairs: bad row count in header: " + header);
  const std::string gttok = h[3].substr(3);
  CP_CHECK(gttok == "0" || gttok == "1",
           "corrpairs: bad gt flag in header: " + header);

  CorrRecord rec;
  rec.has_gt = gttok == "1";
  if (rec.has_gt) {
    for (int r = 0; r < 3; ++r) {
      const auto toks =
          detail::split_tokens(detail::next_line(is, "rotation row"));
      CP_CHECK(toks.size() == 3, "corrpairs: rotation row needs 3 values");
      for (int cix = 0; cix < 3; ++cix)
        rec.pose.rotation(r, cix) =
            detail::parse_double_token(toks[static_cast<size_t>(cix)],
                                       "rotation");
    }
    const auto toks =
        detail::split_tokens(detail::next_line(is, "translation"));
    CP_CHECK(toks.size() == 3, "corrpairs: translation needs 3 values");
    for (int cix = 0; cix < 3; ++cix)
      rec.pose.translation[cix] =
          detail::parse_double_token(toks[static_cast<size_t>(cix)],
                                     "translation");
  }

  rec.correspondences.resize(static_cast<size_t>(n));
  int expected_cols = 0;
  for (long long i = 0; i < n; ++i) {
    const auto toks =
        detail::split_tokens(detail::next_line(is, "correspondence row"));
    CP_CHECK(toks.size() == 4 || toks.size() == 5,
             "corrpairs: row needs 4 or 5 columns");
    if (expected_cols == 0) {
      expected_cols = static_cast<int>(toks.size());
      rec.has_labels = expected_cols == 5;
      if (rec.has_labels) rec.labels.resize(static_cast<size_t>(n));
    }
    CP_CHECK(static_cast<int>(toks.size()) == expected_cols,
             "corrpairs: inconsistent column count across rows");
    Correspondence& c = rec.correspondences[static_cast<size_t>(i)];
    c.x = detail::parse_double_token(toks[0], "x");
    c.y = detail::parse_double_token(toks[1], "y");
    c.u = detail::parse_double_token(toks[2], "u");
    c.v = detail::parse_double_token(toks[3], "v");
    if (rec.has_labels) {
      CP_CHECK(toks[4] == "0" || toks[4] == "1",
               "corrpairs: label must be 0 or 1, got: " + toks[4]);
      rec.labels[static_cast<size_t>(i)] = toks[4] == "1";
    }
  }
  return rec;
}

inline std::vector<CorrRecord> load_pairs_stream(std::istream& is) {
  std::vector<CorrRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(parse_corrpairs_record(is, line));
  }
  CP_CHECK(!out.empty(), "corrpairs: stream holds no records");
  return out;
}

inline std::vector<CorrRecord> load_pairs(const std::string& path) {
  namespace fs = std::filesystem;
  CP_CHECK(fs::exists(path), "load_pairs: no such path: " + path);
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.path().extension() == ".corrpairs") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    CP_CHECK(!files.empty(),
             "load_pairs: directory holds no .corrpairs files: " + path);
  } else {
    files.emplace_back(path);
  }
  std::vector<CorrRecord> out;
  for (const auto& f : files) {
    std::ifstream is(f);
    CP_CHECK(is.good(), "load_pairs: cannot open: " + f.string());
    auto recs = load_pairs_stream(is);
    for (auto& r : recs) out.push_back(std::move(r));
  }
  return out;
}

inline void save_corrpairs(const std::string& path,
                           const std::vector<Correspondence>& c,
                           const RelativePose* pose = nullptr,
                           const std::vector<uint8_t>* labels = nullptr) {
  std::ofstream os(path);
  CP_CHECK(os.good(), "save_corrpairs: cannot open for write: " + path);
  write_corrpairs(os, c, pose, labels);
  os.flush();
  CP_CHECK(os.good(), "save_corrpairs: write failed: " + path);
}

inline void save_scene(const std::string& path, const ScenePair& s) {
  save_corrpairs(path, s.correspondences, &s.pose, &s.labels);
}

}  // namespace corrprune
