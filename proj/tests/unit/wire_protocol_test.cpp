// Copyright 2026 The MSBC Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <unordered_set>

#include "msbc/wire_protocol.hpp"
#include "oracles.hpp"

namespace msbc {
namespace {

TEST(Encode, PingMatchesGrammar) {
  TxnGenerator txns;
  ControlMessage ping{txns.next(), Verb::Ping, {}};
  ping.set("Token", "a1");
  const auto expected = oracle::assemble("CONTROL", "t00000001", {{"Wire", "0"}, {"Verb", "PING"}, {"Token", "a1"}});
  EXPECT_EQ(expected, "MSBC CONTROL t00000001\r\nWire: 0\r\nVerb: PING\r\nToken: a1\r\n\r\n");
  EXPECT_EQ(encode_frame(ping), expected);
}

TEST(Encode, EmptyPayload) {
  WirePacket p{TxnId{"t1t1t1t1"}, WireId{7}, 1, ""};
  const auto bytes = encode_frame(p);
  EXPECT_EQ(bytes, "MSBC SEND t1t1t1t1\r\nWire: 7\r\nSeq: 1\r\nLength: 0\r\n\r\n\r\n");
  auto r = decode_stream(bytes);
  ASSERT_EQ(r.frames.size(), 1u);
  EXPECT_EQ(std::get<WirePacket>(r.frames[0]), p);
}

TEST(Encode, MatchesIndependentAssembler) {
  oracle::FrameGen gen(11);
  for (int i = 0; i < 5000; ++i) {
    const auto f = gen.frame();
    ASSERT_EQ(encode_frame(f), oracle::assemble_frame(f)) << "frame " << i;
  }
}

TEST(Encode, Deterministic) {
  oracle::FrameGen a(3), b(3);
  for (int i = 0; i < 500; ++i) EXPECT_EQ(encode_frame(a.frame()), encode_frame(b.frame()));
}

TEST(Encode, RejectsInvalidFrames) {
  EXPECT_THROW(encode_frame(WirePacket{TxnId{"t0000000"}, kServiceWire, 1, "x"}), Error);
  EXPECT_THROW(encode_frame(WirePacket{TxnId{"t0000000"}, WireId{1}, 0, "x"}), Error);
  EXPECT_THROW(encode_frame(WirePacket{TxnId{"t0000000"}, WireId{1}, 1, std::string(kMaxFrameSize + 1, 'x')}),
               Error);
  EXPECT_THROW(encode_frame(DeliveryReport{TxnId{"t0000000"}, WireId{1}, 1, 99}), Error);
  ControlMessage commission{TxnId{"t0000000"}, Verb::Commission, {}};
  EXPECT_THROW(encode_frame(commission), Error);  // no Ctid
  ControlMessage commissioned{TxnId{"t0000000"}, Verb::Commissioned, {}};
  commissioned.set("Ctid", "heart-1").set("Wire", "0");
  EXPECT_THROW(encode_frame(commissioned), Error);
  ControlMessage bad_value{TxnId{"t0000000"}, Verb::Ping, {}};
  bad_value.set("Token", "a\r\nb");
  EXPECT_THROW(encode_frame(bad_value), Error);
  EXPECT_THROW(Ctid{"bad ctid"}, Error);
  EXPECT_THROW(Ctid{std::string(65, 'a')}, Error);
  EXPECT_THROW(TxnId{"short"}, Error);
}

TEST(Decode, RoundTrip) {
  oracle::FrameGen gen(42);
  for (int i = 0; i < 20000; ++i) {
    const auto f = gen.frame();
    const auto bytes = encode_frame(f);
    const auto r = decode_stream(bytes);
    ASSERT_EQ(r.frames.size(), 1u) << "frame " << i;
    ASSERT_EQ(r.consumed, bytes.size());
    ASSERT_EQ(r.frames[0], f) << "frame " << i;
  }
}

TEST(Decode, Concatenation) {
  oracle::FrameGen gen(5);
  const auto f1 = gen.frame();
  const auto f2 = gen.frame();
  const auto bytes = encode_frame(f1) + encode_frame(f2);
  const auto r = decode_stream(bytes);
  ASSERT_EQ(r.frames.size(), 2u);
  EXPECT_EQ(r.frames[0], f1);
  EXPECT_EQ(r.frames[1], f2);
  EXPECT_EQ(r.consumed, bytes.size());
}

TEST(Decode, NeverConsumesPartialFrame) {
  oracle::FrameGen gen(6);
  for (int i = 0; i < 300; ++i) {
    const auto bytes = encode_frame(gen.frame());
    for (std::size_t n = 0; n < bytes.size(); n += 1 + bytes.size() / 40) {
      const auto r = decode_stream(std::string_view(bytes).substr(0, n));
      ASSERT_TRUE(r.frames.empty());
      ASSERT_EQ(r.consumed, 0u);
    }
    const auto r = decode_stream(std::string_view(bytes).substr(0, bytes.size() - 1));
    ASSERT_TRUE(r.frames.empty());
  }
}

TEST(Decode, BinarySafePayload) {
  std::string payload = "\r\n\r\nMSBC SEND t00000009\r\nWire: 1\r\nSeq: 1\r\nLength: 3\r\n\r\nabc\r\n";
  payload.push_back('\0');
  for (int b = 0; b < 256; ++b) payload.push_back(static_cast<char>(b));
  WirePacket p{TxnId{"t00000001"}, WireId{3}, 9, payload};
  const auto r = decode_stream(encode_frame(p) + encode_frame(p));
  ASSERT_EQ(r.frames.size(), 2u);
  EXPECT_EQ(std::get<WirePacket>(r.frames[1]).payload, payload);
}

TEST(Decode, ChunkedEqualsWhole) {
  oracle::FrameGen gen(77);
  for (int round = 0; round < 200; ++round) {
    std::string stream;
    std::vector<Frame> frames;
    const auto n = 1 + gen.below(8);
    for (std::uint64_t i = 0; i < n; ++i) {
      frames.push_back(gen.frame());
      stream += encode_frame(frames.back());
    }
    const auto whole = decode_stream(stream);
    ASSERT_EQ(whole.frames, frames);

    StreamDecoder dec;
    std::vector<Frame> chunked;
    std::size_t pos = 0;
    while (pos < stream.size()) {
      const auto len = std::min<std::size_t>(stream.size() - pos, round % 3 == 0 ? 1 : 1 + gen.below(300));
      for (auto& f : dec.feed(std::string_view(stream).substr(pos, len))) chunked.push_back(std::move(f));
      pos += len;
    }
    ASSERT_EQ(chunked, whole.frames) << "round " << round;
    EXPECT_EQ(dec.buffered(), 0u);
  }
}

TEST(Decode, IgnoresUnknownHeadersOnPackets) {
  const std::string bytes =
      "MSBC SEND t00000001\r\nX-Dest: somewhere\r\nWire: 4\r\nSeq: 2\r\nTo: attacker\r\nLength: 2\r\n\r\nhi\r\n";
  const auto r = decode_stream(bytes);
  ASSERT_EQ(r.frames.size(), 1u);
  EXPECT_EQ(std::get<WirePacket>(r.frames[0]), (WirePacket{TxnId{"t00000001"}, WireId{4}, 2, "hi"}));
}

TEST(Decode, RejectsMalformed) {
  const std::vector<std::string> bad{
      "HTTP/1.1 200 OK\r\n\r\n",
      "MSBC JUMP t00000001\r\n\r\n",
      "MSBC SEND t0\r\nWire: 1\r\nSeq: 1\r\nLength: 0\r\n\r\n\r\n",
      "MSBC SEND t00000001\r\nWire: 1\r\nSeq: 1\r\n\r\n",
      "MSBC SEND t00000001\r\nWire: 1\r\nSeq: 1\r\nLength: 2\r\n\r\nabXY",
      "MSBC SEND t00000001\r\nWire: 1\r\nWire: 2\r\nSeq: 1\r\nLength: 0\r\n\r\n\r\n",
      "MSBC SEND t00000001\r\nWire: 01\r\nSeq: 1\r\nLength: 0\r\n\r\n\r\n",
      "MSBC CONTROL t00000001\r\nWire: 3\r\nVerb: PING\r\n\r\n",
      "MSBC CONTROL t00000001\r\nWire: 0\r\nVerb: DANCE\r\n\r\n",
      "MSBC REPORT t00000001\r\nWire: 1\r\nSeq: 1\r\nStatus: 1000\r\n\r\n",
      "MSBC SEND t00000001\r\nWire: 1\r\nSeq: 1\r\nLength: 99999999\r\n\r\n",
      "MSBC SEND t00000001\nWire: 1\n",
  };
  for (const auto& b : bad) EXPECT_THROW(decode_stream(b), ProtocolViolation) << b;
}

TEST(Decode, ViolationOffsetsAreAbsolute) {
  StreamDecoder dec;
  const auto good = encode_frame(ControlMessage{TxnId{"t00000001"}, Verb::Pong, {}});
  EXPECT_EQ(dec.feed(good).size(), 1u);
  try {
    dec.feed("MSBC JUMP t00000002\r\n\r\n");
    FAIL() << "expected a violation";
  } catch (const ProtocolViolation& v) {
    EXPECT_GE(v.offset(), good.size());
  }
}

TEST(Decode, RespectsPayloadLimit) {
  DecodeLimits limits;
  limits.max_payload = 100;
  WirePacket p{TxnId{"t00000001"}, WireId{1}, 1, std::string(101, 'x')};
  EXPECT_THROW(decode_stream(encode_frame(p), limits), ProtocolViolation);
  p.payload.resize(100);
  EXPECT_EQ(decode_stream(encode_frame(p), limits).frames.size(), 1u);
}

TEST(Decode, FuzzNeverCrashes) {
  oracle::FrameGen gen(2024);
  const std::string seed_stream = [&] {
    std::string s;
    for (int i = 0; i < 20; ++i) s += encode_frame(gen.frame());
    return s;
  }();
  for (int i = 0; i < 100000; ++i) {
    std::string input;
    switch (i % 3) {
      case 0:  // raw noise
        input = gen.payload(200);
        break;
      case 1: {  // mutated valid stream
        const auto start = gen.below(seed_stream.size());
        input = seed_stream.substr(start, gen.below(600));
        for (int m = 0; m < 3 && !input.empty(); ++m) input[gen.below(input.size())] = static_cast<char>(gen.below(256));
        break;
      }
      default:  // valid start line, garbage after
        input = "MSBC SEND t00000001\r\n" + gen.payload(100);
        break;
    }
    try {
      StreamDecoder dec;
      std::size_t pos = 0;
      while (pos < input.size()) {
        const auto len = 1 + gen.below(64);
        dec.feed(std::string_view(input).substr(pos, len));
        pos += len;
      }
      EXPECT_LE(dec.buffered(), input.size());
    } catch (const ProtocolViolation&) {
    }
  }
}

TEST(Offer, RoundTrip) {
  oracle::FrameGen gen(9);
  for (int i = 0; i < 1000; ++i) {
    const auto o = gen.offer();
    EXPECT_EQ(decode_offer(encode_offer(o)), o);
    EXPECT_EQ(encode_offer(o), oracle::offer_body(o));
  }
  EXPECT_THROW(decode_offer("security: plain\r\n"), Error);
  EXPECT_THROW(decode_offer("security: maybe\r\nmax-frame-size: 100\r\npayload-endpoint: a:1\r\nrole: lgw\r\n"), Error);
}

TEST(Txn, FirstIdAndCharset) {
  TxnGenerator g;
  EXPECT_EQ(g.next().str(), "t00000001");
  const auto second = g.next();
  EXPECT_TRUE(TxnId::valid(second.str()));
  EXPECT_NE(second.str(), "t00000001");
}

TEST(Txn, MillionDistinct) {
  TxnGenerator g;
  std::unordered_set<std::string> seen;
  seen.reserve(1000000);
  for (int i = 0; i < 1000000; ++i) seen.insert(g.next().str());
  EXPECT_EQ(seen.size(), 1000000u);
}

}  // namespace
}  // namespace msbc
