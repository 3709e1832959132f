#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <thread>

#include "test_support.hpp"
#include "topoforge/checkpoint.hpp"
#include "topoforge/dit.hpp"
#include "topoforge/sampler.hpp"
#include "topoforge/service.hpp"
#include "topoforge/simp.hpp"

#include <httplib.h>
#undef _res

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace topoforge;
using topoforge::testing::TempDir;
using Clock = std::chrono::steady_clock;

struct Event {
  std::string type;
  json data;
};

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    service::ServiceConfig cfg;
    cfg.port = 0;
    cfg.checkpoint_dir = dir.path.string();
    svc = std::make_unique<service::DesignService>(cfg);
    port = svc->start();
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    client->set_read_timeout(60, 0);
  }
  void TearDown() override {
    client.reset();
    svc.reset();
  }

  httplib::Result post(const std::string& path, const json& body) {
    return client->Post(path, body.dump(), "application/json");
  }

  std::string define(const json& body) {
    auto r = post("/api/problems", body);
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 200) << r->body;
    return json::parse(r->body)["problem_id"];
  }

  std::string submit(const std::string& problem, const std::string& engine, const json& params) {
    auto r = post("/api/jobs", {{"problem_id", problem}, {"engine", engine}, {"params", params}});
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 202) << r->body;
    return json::parse(r->body)["job_id"];
  }

  // Blocks until the stream ends.
  std::vector<Event> events(const std::string& job) {
    auto r = client->Get("/api/jobs/" + job + "/events");
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "text/event-stream");
    std::vector<Event> out;
    std::size_t pos = 0;
    const std::string& body = r->body;
    while (pos < body.size()) {
      const auto end = body.find("\n\n", pos);
      if (end == std::string::npos) break;
      const std::string frame = body.substr(pos, end - pos);
      pos = end + 2;
      const auto nl = frame.find('\n');
      Event e;
      e.type = frame.substr(7, nl - 7);
      e.data = json::parse(frame.substr(nl + 7));
      out.push_back(e);
    }
    return out;
  }

  json status(const std::string& job) {
    auto r = client->Get("/api/jobs/" + job);
    EXPECT_TRUE(r);
    return json::parse(r->body);
  }

  json wait_for(const std::string& job, const std::function<bool(const json&)>& pred) {
    const auto deadline = Clock::now() + std::chrono::seconds(60);
    for (;;) {
      auto s = status(job);
      if (pred(s) || Clock::now() > deadline) return s;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  }

  TempDir dir;
  std::unique_ptr<service::DesignService> svc;
  std::unique_ptr<httplib::Client> client;
  int port = 0;
};

json cantilever_body(int grid = 64, double f = 0.4) {
  return {{"grid", grid},
          {"anchors", json::array({{{"kind", "segment"}, {"from", "corner-bl"}, {"to", "corner-tl"}}})},
          {"load", {{"x", 1.0}, {"y", 0.5}, {"angle", -90}}},
          {"f", f}};
}

bool has_field(const json& body, const std::string& field) {
  for (const auto& e : body["errors"])
    if (e["field"] == field) return true;
  return false;
}

TEST_F(ServiceTest, CantileverProblemReturnsFullMaterialFields) {
  auto r = post("/api/problems", cantilever_body());
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200) << r->body;
  const auto body = json::parse(r->body);
  EXPECT_EQ(body["nx"], 64);
  EXPECT_EQ(body["load"]["i"], 64);
  EXPECT_EQ(body["load"]["j"], 32);
  const auto stress = body["stress"].get<std::vector<double>>();
  const auto strain = body["strain_energy"].get<std::vector<double>>();
  ASSERT_EQ(stress.size(), 64u * 64u);
  ASSERT_EQ(strain.size(), 64u * 64u);
  const auto [s, e] = sampler::conditioning_fields(cantilever_problem(64, 64, 0.4));
  EXPECT_EQ(stress, s.values);
  EXPECT_EQ(strain, e.values);
}

TEST_F(ServiceTest, IdenticalBodiesGiveIdenticalResponses) {
  auto a = post("/api/problems", cantilever_body(32));
  auto b = post("/api/problems", cantilever_body(32));
  ASSERT_TRUE(a && b);
  EXPECT_EQ(a->body, b->body);
}

TEST_F(ServiceTest, InvalidProblemsGetFieldLevelMessages) {
  auto r = post("/api/problems", cantilever_body(64, 0.7));
  ASSERT_EQ(r->status, 422);
  EXPECT_TRUE(has_field(json::parse(r->body), "f")) << r->body;
  auto body = cantilever_body(16, 0.7);
  body["allow_any_f"] = true;
  EXPECT_EQ(post("/api/problems", body)->status, 200);

  body = cantilever_body(16);
  body["anchors"] = json::array({{{"site", "nowhere"}}});
  r = post("/api/problems", body);
  ASSERT_EQ(r->status, 422);
  EXPECT_TRUE(has_field(json::parse(r->body), "anchors[0].site")) << r->body;

  body["anchors"] = json::array();
  for (const char* s : {"corner-bl", "corner-br", "corner-tl", "corner-tr", "mid-top"}) body["anchors"].push_back({{"site", s}});
  EXPECT_TRUE(has_field(json::parse(post("/api/problems", body)->body), "anchors"));

  body["anchors"] = json::array({{{"site", "corner-bl"}}});  // a single pin leaves rotation free
  r = post("/api/problems", body);
  ASSERT_EQ(r->status, 422);
  EXPECT_TRUE(has_field(json::parse(r->body), "anchors")) << r->body;

  body = cantilever_body(16);
  body["anchors"] = json::array({{{"kind", "segment"}, {"from", "corner-bl"}, {"to", "corner-tr"}}});
  EXPECT_TRUE(has_field(json::parse(post("/api/problems", body)->body), "anchors[0]"));

  body = cantilever_body(16);
  body["load"] = {{"x", 0.0}, {"y", 0.5}, {"angle", 0}};  // on the clamped edge
  r = post("/api/problems", body);
  ASSERT_EQ(r->status, 422);
  EXPECT_TRUE(has_field(json::parse(r->body), "load")) << r->body;

  body = cantilever_body(16);
  body["load"] = {{"x", 1.5}, {"y", 0.5}};
  r = post("/api/problems", body);
  const auto errs = json::parse(r->body);
  EXPECT_TRUE(has_field(errs, "load.x"));
  EXPECT_TRUE(has_field(errs, "load.angle"));

  r = client->Post("/api/problems", "{not json", "application/json");
  EXPECT_EQ(r->status, 422);
}

TEST_F(ServiceTest, SimpJobStreamsEachIterationThenTheResult) {
  const auto pid = define(cantilever_body(16));
  const auto job = submit(pid, "simp", {{"max_iters", 12}, {"progress_every", 4}});
  const auto evs = events(job);
  ASSERT_EQ(evs.size(), 13u);
  for (int k = 0; k < 12; ++k) {
    EXPECT_EQ(evs[k].type, "progress");
    EXPECT_EQ(evs[k].data["iteration"], k + 1);
    EXPECT_EQ(evs[k].data.contains("grid"), (k + 1) % 4 == 0) << k;
  }
  const auto& done = evs.back();
  EXPECT_EQ(done.type, "done");
  const auto& result = done.data["result"];
  const auto density = result["density"].get<std::vector<double>>();
  ASSERT_EQ(density.size(), 256u);

  simp::SimpConfig cfg;
  cfg.max_iters = 12;
  const auto direct = simp::optimize(cantilever_problem(16, 16, 0.4), cfg);
  EXPECT_EQ(density, direct.final_density.values);
  EXPECT_EQ(result["compliance_history"].get<std::vector<double>>(), direct.compliance_history);
  for (const char* key : {"vf_error_pct", "load_discrepancy", "floating_material", "compliance"})
    EXPECT_TRUE(result["metrics"].contains(key)) << key;

  const auto s = status(job);
  EXPECT_EQ(s["status"], "done");
  EXPECT_EQ(s["result"]["density"], result["density"]);
  // A late subscriber gets the same replay.
  EXPECT_EQ(events(job).size(), 13u);
  EXPECT_EQ(client->Delete("/api/jobs/" + job)->status, 409);
}

TEST_F(ServiceTest, ProgressGridsAreDownsampledBytes) {
  const auto pid = define(cantilever_body(64));
  const auto evs = events(submit(pid, "simp", {{"max_iters", 2}}));
  ASSERT_EQ(evs.size(), 3u);
  const auto& grid = evs[0].data["grid"];
  EXPECT_EQ(grid["nx"], 32);
  EXPECT_EQ(grid["ny"], 32);
  EXPECT_EQ(grid["encoding"], "u8");
  ASSERT_EQ(grid["data"].size(), 1024u);
  for (const auto& v : grid["data"]) {
    EXPECT_GE(v.get<int>(), 0);
    EXPECT_LE(v.get<int>(), 255);
  }
  EXPECT_EQ(evs[2].data["result"]["density"].size(), 4096u);
}

TEST_F(ServiceTest, CancelStopsARunningJob) {
  const auto pid = define(cantilever_body(64));
  const auto job = submit(pid, "simp", {{"max_iters", 1000}});
  wait_for(job, [](const json& s) { return s["progress"].get<int>() >= 1; });
  auto del = client->Delete("/api/jobs/" + job);
  ASSERT_EQ(del->status, 202) << del->body;
  const auto s = wait_for(job, [](const json& s) { return s["status"] != "running"; });
  EXPECT_EQ(s["status"], "cancelled");
  EXPECT_FALSE(s.contains("result"));
  const auto evs = events(job);
  ASSERT_FALSE(evs.empty());
  EXPECT_EQ(evs.back().type, "cancelled");
  EXPECT_FALSE(evs.back().data.contains("result"));
  EXPECT_LT(evs.size(), 1001u);
  EXPECT_EQ(client->Delete("/api/jobs/" + job)->status, 409);
}

TEST_F(ServiceTest, UnknownIdsAre404) {
  EXPECT_EQ(client->Get("/api/jobs/j999999")->status, 404);
  EXPECT_EQ(client->Get("/api/jobs/j999999/events")->status, 404);
  EXPECT_EQ(client->Delete("/api/jobs/j999999")->status, 404);
  EXPECT_EQ(post("/api/jobs", {{"problem_id", "pdeadbeef"}, {"engine", "simp"}})->status, 404);
  const auto pid = define(cantilever_body(16));
  auto r = post("/api/jobs", {{"problem_id", pid}, {"engine", "lbfgs"}});
  EXPECT_EQ(r->status, 422);
  r = post("/api/jobs", {{"problem_id", pid}, {"engine", "simp"}, {"params", {{"max_iters", -3}}}});
  EXPECT_EQ(r->status, 422);
  EXPECT_TRUE(has_field(json::parse(r->body), "params.max_iters"));
}

TEST_F(ServiceTest, QueueRunsTwoJobsAtATime) {
  const auto pid = define(cantilever_body(64));
  std::vector<std::string> jobs;
  for (int k = 0; k < 3; ++k) jobs.push_back(submit(pid, "simp", {{"max_iters", 1000}}));
  wait_for(jobs[0], [](const json& s) { return s["status"] == "running"; });
  wait_for(jobs[1], [](const json& s) { return s["status"] == "running"; });
  EXPECT_EQ(status(jobs[2])["status"], "queued");
  auto del = client->Delete("/api/jobs/" + jobs[2]);
  EXPECT_EQ(json::parse(del->body)["status"], "cancelled");
  EXPECT_EQ(status(jobs[2])["status"], "cancelled");
  for (int k = 0; k < 2; ++k) client->Delete("/api/jobs/" + jobs[k]);
  for (int k = 0; k < 2; ++k)
    EXPECT_EQ(wait_for(jobs[k], [](const json& s) { return s["status"] != "running"; })["status"], "cancelled");
}

TEST_F(ServiceTest, CorsForLocalOrigins) {
  httplib::Headers local = {{"Origin", "http://localhost:5173"}};
  auto r = client->Get("/api/checkpoints", local);
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");
  r = client->Options("/api/problems", local);
  EXPECT_EQ(r->status, 204);
  EXPECT_NE(r->get_header_value("Access-Control-Allow-Methods").find("DELETE"), std::string::npos);
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");
  r = client->Get("/api/checkpoints", httplib::Headers{{"Origin", "https://example.com"}});
  EXPECT_FALSE(r->has_header("Access-Control-Allow-Origin"));
}

dit::Checkpoint tiny_checkpoint(int img) {
  dit::Checkpoint ck;
  ck.config = dit::DiTConfig::preset(dit::ModelSize::Tiny, 4, img);
  dit::DiT<float> model(ck.config);
  model.init_adaln_zero(3);
  ck.params = model.params();
  ck.step = 17;
  ck.seed = 3;
  ck.learning_rate = 1e-4;
  ck.batch_size = 16;
  return ck;
}

TEST_F(ServiceTest, CheckpointListingAndLoading) {
  auto r = client->Get("/api/checkpoints");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body), json::array());

  std::ofstream(dir / "broken.ckpt") << "not a checkpoint at all";
  r = post("/api/checkpoints/load", {{"path", "broken.ckpt"}});
  ASSERT_EQ(r->status, 422);
  EXPECT_NE(json::parse(r->body)["detail"].get<std::string>().find("magic mismatch"), std::string::npos) << r->body;
  EXPECT_EQ(post("/api/checkpoints/load", {{"path", "absent.ckpt"}})->status, 404);
  EXPECT_EQ(post("/api/checkpoints/load", json::object())->status, 422);

  dit::save_checkpoint(tiny_checkpoint(16), dir / "tiny.ckpt");
  r = client->Get("/api/checkpoints");
  const auto list = json::parse(r->body);
  ASSERT_EQ(list.size(), 2u);
  EXPECT_EQ(list[0]["file"], "broken.ckpt");
  EXPECT_TRUE(list[0].contains("error"));
  EXPECT_EQ(list[1]["name"], "DiT-T-4");

  r = post("/api/checkpoints/load", {{"path", "tiny.ckpt"}});
  ASSERT_EQ(r->status, 200) << r->body;
  const auto echo = json::parse(r->body);
  const auto header = dit::read_checkpoint_header(dir / "tiny.ckpt");
  EXPECT_EQ(echo["name"], header.config.name());
  EXPECT_EQ(echo["size"], "tiny");
  EXPECT_EQ(echo["patch_size"], header.config.patch_size);
  EXPECT_EQ(echo["img_size"], header.config.img_size);
  EXPECT_EQ(echo["depth"], header.config.depth);
  EXPECT_EQ(echo["token_dim"], header.config.token_dim);
  EXPECT_EQ(echo["heads"], header.config.heads);
  EXPECT_EQ(echo["step"], header.step);
  EXPECT_EQ(echo["seed"], header.seed);
  EXPECT_EQ(echo["tokens"], 16);
}

TEST_F(ServiceTest, DitJobsNeedACheckpoint) {
  const auto pid = define(cantilever_body(16));
  auto r = post("/api/jobs", {{"problem_id", pid}, {"engine", "dit"}, {"params", {{"steps", 5}}}});
  EXPECT_EQ(r->status, 409);
}

TEST_F(ServiceTest, DitJobAtFiveStepsIsFastAndReproducible) {
  dit::save_checkpoint(tiny_checkpoint(16), dir / "tiny.ckpt");
  ASSERT_EQ(post("/api/checkpoints/load", {{"path", "tiny.ckpt"}})->status, 200);
  const auto pid = define(cantilever_body(16));

  const auto t0 = Clock::now();
  const auto job = submit(pid, "dit", {{"steps", 5}, {"seed", 7}});
  const auto evs = events(job);
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  RecordProperty("seconds", std::to_string(secs));
  EXPECT_LT(secs, 2.0);
  ASSERT_EQ(evs.size(), 6u);
  for (int k = 0; k < 5; ++k) {
    EXPECT_EQ(evs[k].type, "progress");
    EXPECT_EQ(evs[k].data["step"], k + 1);
    EXPECT_TRUE(evs[k].data.contains("grid"));
  }
  ASSERT_EQ(evs[5].type, "done");
  const auto density = evs[5].data["result"]["density"].get<std::vector<double>>();
  ASSERT_EQ(density.size(), 256u);
  for (double v : density) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(evs[5].data["result"]["model"], "DiT-T-4");

  const auto again = events(submit(pid, "dit", {{"steps", 5}, {"seed", 7}}));
  EXPECT_EQ(again.back().data["result"]["density"], evs[5].data["result"]["density"]);
  const auto other = events(submit(pid, "dit", {{"steps", 5}, {"seed", 8}}));
  EXPECT_NE(other.back().data["result"]["density"], evs[5].data["result"]["density"]);

  auto r = post("/api/jobs", {{"problem_id", pid}, {"engine", "dit"}, {"params", {{"steps", 7}}}});
  EXPECT_EQ(r->status, 422);
  EXPECT_TRUE(has_field(json::parse(r->body), "params.steps"));
  r = post("/api/jobs", {{"problem_id", pid}, {"engine", "dit"}, {"params", {{"steps", 7}, {"allow_any_steps", true}}}});
  EXPECT_EQ(r->status, 202);
  r = post("/api/jobs", {{"problem_id", define(cantilever_body(32))}, {"engine", "dit"}, {"params", {{"steps", 5}}}});
  EXPECT_EQ(r->status, 422);
}

}  // namespace
