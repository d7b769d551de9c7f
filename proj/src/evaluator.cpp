#include "fusionreid/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "fusionreid/image_io.hpp"

namespace fusionreid {

std::vector<EmbeddingRecord> extract_features(FusionReid& model, const Dataset& data,
                                              const std::vector<std::size_t>& indices, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("extract_features: batch_size must be >= 1");
  NoGradGuard no_grad;
  std::vector<EmbeddingRecord> records;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                         indices.begin() + static_cast<std::ptrdiff_t>(
                                                               std::min(indices.size(), start + batch_size)));
    std::vector<std::size_t> cams;
    for (std::size_t i : chunk) cams.push_back(static_cast<std::size_t>(data.samples[i].cam_id));
    const ModelOutput out = model.forward(stack_images(data, chunk), cams, false);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      EmbeddingRecord r;
      r.pid = data.samples[chunk[b]].pid;
      r.cam_id = data.samples[chunk[b]].cam_id;
      for (const Tensor& f : out.features) {
        const std::size_t d = f.size(1);
        r.feature.insert(r.feature.end(), f.data().begin() + static_cast<std::ptrdiff_t>(b * d),
                         f.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * d));
      }
      double norm = 0.0;
      for (double v : r.feature) norm += v * v;
      norm = std::sqrt(norm);
      if (!(norm > 0.0) || !std::isfinite(norm)) {
        throw NumericalError("extract_features: degenerate embedding for sample " + std::to_string(chunk[b]));
      }
      for (double& v : r.feature) v /= norm;
      records.push_back(std::move(r));
    }
  }
  return records;
}

std::vector<double> distance_matrix(const std::vector<EmbeddingRecord>& queries,
                                    const std::vector<EmbeddingRecord>& gallery) {
  if (gallery.empty()) throw DataError("distance_matrix: empty gallery");
  std::vector<double> d(queries.size() * gallery.size());
  for (std::size_t q = 0; q < queries.size(); ++q)
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      const auto& a = queries[q].feature;
      const auto& b = gallery[g].feature;
      if (a.size() != b.size()) throw DimensionError("distance_matrix: embedding sizes differ");
      double s = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
      d[q * gallery.size() + g] = s;
    }
  return d;
}

double average_precision(const std::vector<int>& relevance) {
  double hits = 0.0, sum = 0.0;
  for (std::size_t k = 0; k < relevance.size(); ++k) {
    if (relevance[k]) {
      hits += 1.0;
      sum += hits / static_cast<double>(k + 1);
    }
  }
  return hits > 0.0 ? sum / hits : 0.0;
}

EvalReport evaluate_distances(const std::vector<double>& dist, const std::vector<int>& q_pids,
                              const std::vector<int>& q_cams, const std::vector<int>& g_pids,
                              const std::vector<int>& g_cams, std::size_t max_rank) {
  const std::size_t nq = q_pids.size(), ng = g_pids.size();
  if (ng == 0) throw DataError("evaluate: empty gallery");
  if (nq == 0) throw DataError("evaluate: empty query set");
  if (dist.size() != nq * ng || q_cams.size() != nq || g_cams.size() != ng) {
    throw DimensionError("evaluate: inconsistent query/gallery sizes");
  }
  if (max_rank == 0) throw ConfigError("evaluate: max_rank must be >= 1");
  EvalReport rep;
  rep.cmc.assign(max_rank, 0.0);
  std::vector<std::size_t> order(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    std::iota(order.begin(), order.end(), 0);
    const double* row = dist.data() + q * ng;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    std::vector<int> rel;
    for (std::size_t g : order) {
      if (g_pids[g] == q_pids[q] && g_cams[g] == q_cams[q]) continue;
      rel.push_back(g_pids[g] == q_pids[q] ? 1 : 0);
    }
    const auto first = std::find(rel.begin(), rel.end(), 1);
    if (first == rel.end()) {
      ++rep.skipped;
      continue;
    }
    rep.ap.push_back(average_precision(rel));
    for (auto r = static_cast<std::size_t>(first - rel.begin()); r < max_rank; ++r) rep.cmc[r] += 1.0;
  }
  rep.num_queries = rep.ap.size();
  if (rep.num_queries == 0) {
    throw DataError("evaluate: none of the " + std::to_string(nq) + " queries has a valid gallery match");
  }
  const double n = static_cast<double>(rep.num_queries);
  rep.mAP = std::accumulate(rep.ap.begin(), rep.ap.end(), 0.0) / n;
  for (double& c : rep.cmc) c /= n;
  return rep;
}

EvalReport evaluate(const std::vector<EmbeddingRecord>& queries, const std::vector<EmbeddingRecord>& gallery,
                    std::size_t max_rank) {
  if (queries.empty()) throw DataError("evaluate: empty query set");
  const auto dist = distance_matrix(queries, gallery);
  std::vector<int> qp, qc, gp, gc;
  for (const auto& r : queries) {
    qp.push_back(r.pid);
    qc.push_back(r.cam_id);
  }
  for (const auto& r : gallery) {
    gp.push_back(r.pid);
    gc.push_back(r.cam_id);
  }
  return evaluate_distances(dist, qp, qc, gp, gc, max_rank);
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["mAP"] = mAP;
  j["cmc"] = cmc;
  j["num_queries"] = num_queries;
  j["skipped"] = skipped;
  return j.dump(2);
}

std::vector<std::filesystem::path> export_attention(FusionReid& model, const Tensor& image, std::size_t cam_id,
                                                    const std::filesystem::path& out_dir) {
  if (!model.dmf()) throw ConfigError("export_attention needs the fusion architecture");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());

  const Tensor batch = image.dim() == 3 ? reshape(image, {1, image.size(0), image.size(1), image.size(2)}) : image;
  if (batch.size(0) != 1) throw DimensionError("export_attention takes a single image");
  DmfTrace trace;
  trace.capture_attention = true;
  {
    NoGradGuard no_grad;
    model.forward(batch, {cam_id}, false, &trace);
  }
  const Grid grid = model.dmf()->grid();
  const std::size_t cells = grid.cells();
  std::vector<std::filesystem::path> written;
  for (const auto& rec : trace.attention) {
    const std::size_t heads = rec.tap.shape.at(1), keys = rec.tap.shape.at(2);
    const std::size_t offset = keys - cells;  // 1 for the SEU (self weight of the global token), 0 for the MFU
    if (keys < cells || offset > 1) throw DimensionError("attention row of " + std::to_string(keys) + " keys");
    const std::string stem = "L" + std::to_string(rec.layer) + "_" + to_string(rec.branch) + "_" + rec.unit;
    const auto csv_path = out_dir / (stem + ".csv");
    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot write '" + csv_path.string() + "'");
    csv << "head";
    if (offset) csv << ",global";
    for (std::size_t y = 0; y < grid.height; ++y)
      for (std::size_t x = 0; x < grid.width; ++x) csv << ",r" << y << "c" << x;
    csv << '\n';
    csv.precision(17);
    for (std::size_t h = 0; h < heads; ++h) {
      const double* row = rec.tap.weights.data() + h * keys;
      csv << h;
      for (std::size_t k = 0; k < keys; ++k) csv << ',' << row[k];
      csv << '\n';
      const auto pgm_path = out_dir / (stem + "_h" + std::to_string(h) + ".pgm");
      write_pgm(pgm_path, std::vector<double>(row + offset, row + keys), grid.height, grid.width);
      written.push_back(pgm_path);
    }
    if (!csv) throw IoError("write failed for '" + csv_path.string() + "'");
    written.push_back(csv_path);
  }
  return written;
}

}  // namespace fusionreid
