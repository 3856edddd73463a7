import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from cropr import data as D
from cropr.errors import ConfigError


@pytest.fixture(scope="module")
def needle():
    return D.NeedleTask()


def test_needle_is_pure_function_of_seed(needle):
    a, b = needle.dataset(6, seed=3), needle.dataset(6, seed=3)
    for key in a:
        assert a[key].tobytes() == b[key].tobytes()
    assert needle.dataset(6, seed=4)["images"].tobytes() != a["images"].tobytes()
    tail = needle.dataset(3, seed=3, start=3)
    assert tail["images"].tobytes() == a["images"][3:].tobytes()


def test_needle_mask_and_shapes(needle):
    d = needle.dataset(20, seed=0)
    assert d["images"].shape == (20, 3, 64, 64)
    assert np.all(d["masks"].reshape(20, -1).sum(axis=1) == needle.num_informative)
    assert set(np.unique(d["labels"])) <= set(range(needle.num_classes))


def test_stamped_patches_have_unit_statistics(needle):
    for pattern in [needle.templates[0] + needle.beacon + needle.marker,
                    needle.templates[2] + needle.beacon + needle.marker]:
        assert np.all(pattern.mean(axis=(1, 2)) == 0) and np.all(pattern.var(axis=(1, 2)) == 1)
    rng = np.random.default_rng(0)
    noise = D._balanced_signs(rng, needle.beacon_pixels)
    assert np.all((needle.templates[1] + noise + needle.marker).var(axis=(1, 2)) == 1)


def test_needle_config_errors():
    with pytest.raises(ConfigError):
        D.NeedleTask(num_informative=10, num_decoys=30, num_distractors=30)
    with pytest.raises(ConfigError):
        D.NeedleTask(num_classes=1)
    with pytest.raises(ConfigError):
        D.build_task("imagenet")


def test_nearest_centroid_oracle_solves_needle(needle):
    train, test = needle.dataset(400, seed=10), needle.dataset(400, seed=11)
    oracle = D.NearestCentroidOracle(needle.patch).fit(train["images"], train["labels"], train["masks"])
    acc = (oracle.predict(test["images"], test["masks"]) == test["labels"]).mean()
    assert acc >= 0.99


def test_multilabel_correlation_auc():
    task = D.MultilabelTask()
    d = task.dataset(400, seed=5)
    scores = task.correlation_scores(d["images"])
    for c in range(task.num_classes):
        assert roc_auc_score(d["targets"][:, c], scores[:, c]) >= 0.99
    _, target = task.sample(np.random.default_rng(0), present=[True, False, True, False])
    assert target.tolist() == [1.0, 0.0, 1.0, 0.0]


def test_segmentation_labels():
    task = D.SegmentationTask()
    d = task.dataset(10, seed=2)
    assert d["pixel_labels"].shape == (10, 64, 64)
    assert d["pixel_labels"].min() >= 0 and d["pixel_labels"].max() < task.num_classes
    smp = task.sample(np.random.default_rng(0), num_rects=2)
    for cls, y0, x0, y1, x1 in smp.rects:
        assert all(v % task.align == 0 for v in (y0, x0, y1, x1))
    assert d["images"].tobytes() == task.dataset(10, seed=2)["images"].tobytes()
    with pytest.raises(ConfigError):
        D.SegmentationTask(num_classes=1)


def test_retention_recall_examples():
    masks = np.zeros((2, 2, 2), dtype=bool)
    masks[:, 0, 1] = True
    assert D.retention_recall(np.tile(np.arange(4), (2, 1)), masks) == 1.0
    assert D.retention_recall(np.full((2, 1), -1), masks) == 0.0
    assert np.isnan(D.retention_recall(np.zeros((1, 1), dtype=int), np.zeros((1, 4), dtype=bool)))


def test_retention_recall_random_expectation():
    rng = np.random.default_rng(6)
    m, keep = 64, 16
    masks = np.zeros((200, m), dtype=bool)
    for i in range(200):
        masks[i, rng.choice(m, 4, replace=False)] = True
    kept = np.stack([np.sort(rng.choice(m, keep, replace=False)) for _ in range(200)])
    assert abs(D.retention_recall(kept, masks) - keep / m) <= 0.05


def test_mean_iou_examples():
    t = np.array([[0, 1], [1, 2]])
    assert D.mean_iou(t, t, 3) == 1.0
    assert D.mean_iou(np.zeros_like(t), t, 3) == pytest.approx(0.25 / 3)
    # the ignored pixel takes class 2 out of both prediction and target
    assert D.mean_iou(t, np.where(t == 2, 255, t), 3) == 1.0
