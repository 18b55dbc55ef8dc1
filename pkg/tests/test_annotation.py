import collections

import numpy as np
import pytest
import torch

from advsynth.annotation import (
    AnnotationService,
    DuplicateImageError,
    GroundTruthPolicy,
    NoisyPolicy,
    PartialSubmissionError,
    QuorumConflictError,
    StalePageError,
    make_ab_pairs,
    run_simulated_workers,
)
from advsynth.evaluation import NA, ab_detection_rate


def items(n, k=2, prefix="img"):
    return [{"id": f"{prefix}-{i:04d}", "hash": f"h{i}", "k": k} for i in range(n)]


@pytest.fixture
def service(tmp_path):
    return AnnotationService(tmp_path / "events.jsonl", quorum=5, page_size=10)


class TestEnqueue:
    def test_pool_grows_then_idempotent(self, service):
        batch = items(25)
        a = service.enqueue_batch(batch)
        assert service.stats()["total_images"] == 25
        b = service.enqueue_batch(batch)
        assert b == a
        assert service.stats()["total_images"] == 25

    def test_duplicate_id_different_content_rejected(self, service):
        service.enqueue_batch(items(3))
        clashing = [{"id": "img-0001", "hash": "different", "k": 2}]
        with pytest.raises(DuplicateImageError):
            service.enqueue_batch(clashing)


class TestPaging:
    def test_fresh_pool_gives_ten_distinct(self, service):
        service.enqueue_batch(items(30))
        page = service.next_page("alice")
        assert len(page.items) == 10
        assert len({i["image_id"] for i in page.items}) == 10

    def test_worker_never_sees_an_image_twice(self, service):
        service.enqueue_batch(items(25))
        seen = set()
        while (page := service.next_page("alice")) is not None:
            ids = {i["image_id"] for i in page.items}
            assert not ids & seen
            seen |= ids
            service.submit_page("alice", page.page_id, [0] * len(page.items))
        assert len(seen) == 25

    def test_empty_when_nothing_eligible(self, service):
        service.enqueue_batch(items(5))
        page = service.next_page("alice")
        service.submit_page("alice", page.page_id, [0] * 5)
        assert service.next_page("alice") is None

    def test_neediest_images_first(self, service):
        service.enqueue_batch(items(12))
        # bob labels the first page of 10, leaving 2 images with higher need
        page = service.next_page("bob")
        service.submit_page("bob", page.page_id, [0] * 10)
        page2 = service.next_page("carol")
        ids = [i["image_id"] for i in page2.items]
        assert ids[0] == "img-0010" and ids[1] == "img-0011"


class TestSubmission:
    def test_partial_submission_rejected_atomically(self, service):
        service.enqueue_batch(items(10))
        page = service.next_page("alice")
        with pytest.raises(PartialSubmissionError):
            service.submit_page("alice", page.page_id, [0] * 9)
        assert service.stats()["labels_recorded"] == 0

    def test_invalid_label_rejected(self, service):
        service.enqueue_batch(items(10))
        page = service.next_page("alice")
        with pytest.raises(ValueError):
            service.submit_page("alice", page.page_id, [7] * 10)
        assert service.stats()["labels_recorded"] == 0

    def test_na_accepted(self, service):
        service.enqueue_batch(items(10))
        page = service.next_page("alice")
        ack = service.submit_page("alice", page.page_id, [NA] * 10)
        assert ack["recorded"] == 10

    def test_resubmit_after_lost_ack_is_deduplicated(self, service):
        service.enqueue_batch(items(10))
        page = service.next_page("alice")
        first = service.submit_page("alice", page.page_id, [0] * 10)
        assert first["recorded"] == 10
        again = service.submit_page("alice", page.page_id, [0] * 10)
        assert again["duplicate"] is True and again["recorded"] == 0
        assert service.stats()["labels_recorded"] == 10

    def test_stale_page_rejected(self, service):
        service.enqueue_batch(items(10))
        page = service.next_page("alice")
        with pytest.raises(StalePageError):
            service.submit_page("bob", page.page_id, [0] * 10)
        with pytest.raises(StalePageError):
            service.submit_page("alice", "page-999999", [0] * 10)

    def test_released_page_conflicts_retriably(self, service):
        service.enqueue_batch(items(10))
        page = service.next_page("alice")
        service.release_page(page.page_id)
        with pytest.raises(StalePageError):
            service.submit_page("alice", page.page_id, [0] * 10)
        # the images are assignable again after the release
        assert service.next_page("bob") is not None

    def test_quorum_conflict_signal(self, service):
        service.enqueue_batch(items(10))
        page = service.next_page("alice")
        # simulate a slot stolen between assignment and submission
        img = service._images[page.items[0]["image_id"]]
        img.labels = {f"w{i}": 0 for i in range(5)}
        with pytest.raises(QuorumConflictError):
            service.submit_page("alice", page.page_id, [0] * 10)


class TestQuorumCompletion:
    def test_five_workers_drain_the_pool_exactly(self, service):
        service.enqueue_batch(items(40))
        truth = {f"img-{i:04d}": i % 2 for i in range(40)}
        policies = {f"w{j}": GroundTruthPolicy(truth) for j in range(5)}
        recorded = run_simulated_workers(service, policies)
        assert recorded == 200  # 40 images x 5 workers
        stats = service.stats()
        assert stats["pending_images"] == 0
        assert stats["completed_images"] == 40
        for state in service._images.values():
            assert len(state.labels) == 5
            assert len(set(state.labels)) == 5  # distinct workers

    def test_more_workers_than_quorum_never_exceed_it(self, service):
        service.enqueue_batch(items(20))
        truth = {f"img-{i:04d}": 0 for i in range(20)}
        policies = {f"w{j}": GroundTruthPolicy(truth) for j in range(9)}
        run_simulated_workers(service, policies)
        for state in service._images.values():
            assert len(state.labels) == 5

    def test_randomized_interleaving_keeps_invariants(self, tmp_path):
        rng = np.random.default_rng(0)
        service = AnnotationService(tmp_path / "ev.jsonl", quorum=3, page_size=4)
        service.enqueue_batch(items(17))
        open_pages = {}
        workers = [f"w{j}" for j in range(6)]
        for _ in range(300):
            w = workers[rng.integers(0, len(workers))]
            if w in open_pages and rng.random() < 0.6:
                page = open_pages.pop(w)
                service.submit_page(w, page.page_id, [0] * len(page.items))
            elif w not in open_pages:
                page = service.next_page(w)
                if page is not None:
                    open_pages[w] = page
        for state in service._images.values():
            assert len(state.labels) <= 3
            assert len(set(state.labels)) == len(state.labels)
            assert not set(state.labels) & state.holders


class TestDurabilityAndReplay:
    def test_records_survive_restart(self, tmp_path):
        log = tmp_path / "events.jsonl"
        service = AnnotationService(log)
        service.enqueue_batch(items(10))
        page = service.next_page("alice")
        service.submit_page("alice", page.page_id, [1] * 10)
        snapshot = service.assignment_snapshot()
        service.close()

        revived = AnnotationService(log)
        assert revived.assignment_snapshot() == snapshot
        assert revived.stats()["labels_recorded"] == 10
        # the revived service continues issuing pages consistently
        assert revived.next_page("alice") is None
        assert revived.next_page("bob") is not None

    def test_replay_is_byte_identical_after_complex_history(self, tmp_path):
        log = tmp_path / "events.jsonl"
        service = AnnotationService(log, quorum=3, page_size=4)
        service.enqueue_batch(items(9))
        p1 = service.next_page("a")
        p2 = service.next_page("b")
        service.submit_page("a", p1.page_id, [0] * len(p1.items))
        service.release_page(p2.page_id)
        service.enqueue_batch(items(3, prefix="extra"))
        p3 = service.next_page("b")
        service.submit_page("b", p3.page_id, [1] * len(p3.items))
        snapshot = service.assignment_snapshot()
        service.close()
        assert AnnotationService(log, quorum=3, page_size=4).assignment_snapshot() == snapshot


class TestAbPairs:
    def test_counts_and_no_real_reuse(self):
        pairs = make_ab_pairs([f"s{i}" for i in range(100)], [f"r{i}" for i in range(150)], seed=0)
        assert len(pairs) == 100
        reals = [p["left"] if p["synthetic_position"] == "right" else p["right"] for p in pairs]
        assert len(set(reals)) == 100

    def test_positions_balance(self):
        pairs = make_ab_pairs(
            [f"s{i}" for i in range(10_000)], [f"r{i}" for i in range(10_000)], seed=1
        )
        lefts = sum(p["synthetic_position"] == "left" for p in pairs)
        sigma = (10_000 * 0.25) ** 0.5
        assert abs(lefts - 5_000) <= 3 * sigma

    def test_ab_flow_through_service(self, service):
        pairs = make_ab_pairs([f"s{i}" for i in range(10)], [f"r{i}" for i in range(10)], seed=2)
        service.enqueue_batch(
            [{"id": p["pair_id"], "hash": p["pair_id"], "k": 2,
              "meta": {"left": p["left"], "right": p["right"]}} for p in pairs],
            mode="ab",
        )
        page = service.next_page("alice", mode="ab")
        assert page.mode == "ab"
        service.submit_page("alice", page.page_id, ["left"] * 10)
        picks = service.ab_picks()
        assert len(picks) == 10
        rate = ab_detection_rate(pairs, [{k: p[k] for k in ("pair_id", "position")} for p in picks])
        expect = 100.0 * sum(p["synthetic_position"] == "left" for p in pairs) / 10
        assert rate == pytest.approx(expect)

    def test_bad_ab_label_rejected(self, service):
        pairs = make_ab_pairs(["s0"], ["r0"], seed=3)
        service.enqueue_batch(
            [{"id": p["pair_id"], "hash": p["pair_id"], "k": 2} for p in pairs], mode="ab"
        )
        page = service.next_page("alice", mode="ab")
        with pytest.raises(ValueError):
            service.submit_page("alice", page.page_id, [0])


class TestOracleStubs:
    def test_ground_truth_majority_always_matches(self, service):
        service.enqueue_batch(items(20, k=4))
        truth = {f"img-{i:04d}": i % 4 for i in range(20)}
        policies = {f"w{j}": GroundTruthPolicy(truth) for j in range(5)}
        run_simulated_workers(service, policies)
        votes = service.vote_summaries()
        assert len(votes) == 20
        for image_id, vote in votes.items():
            assert vote.majority_label == truth[image_id]
            assert vote.agreement_count == 5

    def test_noise_shifts_agreement_down(self, tmp_path):
        def histogram(flip_p):
            service = AnnotationService(tmp_path / f"ev-{flip_p}.jsonl", quorum=5, page_size=10)
            service.enqueue_batch(items(100, k=10))
            truth = {f"img-{i:04d}": i % 10 for i in range(100)}
            policies = {
                f"w{j}": NoisyPolicy(truth, flip_p, class_count=10, seed=j) for j in range(5)
            }
            run_simulated_workers(service, policies)
            return service.stats()["agreement_histogram"]

        clean = histogram(0.0)
        noisy = histogram(0.5)
        assert clean["5"] == 100
        assert noisy["5"] < 30
        assert sum(noisy[str(k)] for k in (1, 2, 3)) > 30

    def test_classifier_stub_runs_pipeline(self, service, toy_classifier, toy_dataset):
        from advsynth.annotation import ClassifierPolicy
        from advsynth.data import load_all

        test = load_all(toy_dataset, "test")
        ids = [f"img-{i:04d}" for i in range(30)]
        images = {i: test.pixels[k] for k, i in enumerate(ids)}
        service.enqueue_batch([{"id": i, "hash": i, "k": 2} for i in ids])
        policies = {f"w{j}": ClassifierPolicy(toy_classifier, images) for j in range(5)}
        run_simulated_workers(service, policies)
        votes = service.vote_summaries()
        # five identical classifiers agree unanimously with the classifier itself
        for k, i in enumerate(ids):
            assert votes[i].agreement_count == 5
            assert votes[i].majority_label == int(toy_classifier.predict(test.pixels[k : k + 1])[0])


class TestLargePoolExample:
    def test_thousand_images_drain_after_5000_submissions(self, tmp_path):
        service = AnnotationService(tmp_path / "big.jsonl", quorum=5, page_size=10)
        service.enqueue_batch(items(1000))
        assert service.pending_count() == 1000
        truth = {f"img-{i:04d}": i % 2 for i in range(1000)}
        policies = {f"w{j}": GroundTruthPolicy(truth) for j in range(5)}
        recorded = run_simulated_workers(service, policies)
        assert recorded == 5000
        assert service.pending_count() == 0


class TestThreadedAccess:
    def test_concurrent_workers_preserve_invariants(self, tmp_path):
        import threading

        service = AnnotationService(tmp_path / "threads.jsonl", quorum=5, page_size=10)
        service.enqueue_batch(items(60))
        errors = []

        def worker(worker_id):
            try:
                while True:
                    page = service.next_page(worker_id)
                    if page is None:
                        return
                    service.submit_page(worker_id, page.page_id, [0] * len(page.items))
            except Exception as exc:  # pragma: no cover - failure channel
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(f"w{j}",)) for j in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert service.pending_count() == 0
        for state in service._images.values():
            assert len(state.labels) == 5
            assert len(set(state.labels)) == 5

        # replay of the interleaved log reconstructs the same state
        snapshot = service.assignment_snapshot()
        service.close()
        assert AnnotationService(tmp_path / "threads.jsonl").assignment_snapshot() == snapshot
