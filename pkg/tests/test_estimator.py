import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from avatarforge.assets import make_mini_rig, make_synthetic_subject, save_subject
from avatarforge.estimator import Avatar, AvatarReconstructor
from avatarforge.losses import psnr


@pytest.fixture(scope="module")
def subject():
    return make_synthetic_subject(0, make_mini_rig("desk"))


@pytest.fixture(scope="module")
def fitted(subject):
    return AvatarReconstructor(K=1, steps=2).fit(subject)


def test_params_follow_sklearn_conventions():
    est = AvatarReconstructor(K=3, lr=1e-3, config_overrides={"gamma": 0.5})
    p = est.get_params()
    assert p["K"] == 3 and p["config_overrides"] == {"gamma": 0.5}
    twin = clone(est)
    assert twin.get_params() == p and twin is not est
    cfg = est.make_config()
    assert (cfg.K, cfg.lr, cfg.gamma) == (3, 1e-3, 0.5)


def test_unfitted_estimator_refuses_to_predict(subject):
    with pytest.raises(NotFittedError):
        AvatarReconstructor().predict(subject)


def test_fit_predict_score(fitted, subject):
    assert len(fitted.history_) == 3
    assert fitted.n_parameters_ > 0
    avatar = fitted.predict(subject)
    assert isinstance(avatar, Avatar)
    assert len(avatar.renders) == 2
    want = psnr(avatar.renders[-1], subject.input_image, subject.fg_mask)
    assert fitted.score(subject) == want
    # the last history row evaluates the trained weights on the same forward
    assert fitted.history_[-1]["psnr"] == pytest.approx(want, abs=1e-9)
    curve = fitted.training_curve()
    assert curve.shape == (3,) and curve[-1] < curve[0]


def test_fit_accepts_bundle_path(subject, tmp_path):
    path = save_subject(subject, tmp_path / "s0")
    est = AvatarReconstructor(K=1, steps=0).fit(str(path))
    assert len(est.history_) == 1


def test_predict_accepts_tuple_and_validates(fitted, subject):
    a = fitted.predict((subject.input_image, subject.pose_params, subject.rig))
    b = fitted.predict(subject)
    assert np.array_equal(a.mesh.vertices, b.mesh.vertices)
    with pytest.raises(ValueError):
        fitted.predict((subject.input_image * 2.0, subject.pose_params, subject.rig))
    with pytest.raises(TypeError):
        fitted.predict((subject.input_image, None, subject.rig))
    with pytest.raises(TypeError):
        fitted.fit(42)


def test_save_load_roundtrip(fitted, subject, tmp_path):
    fitted.save(tmp_path / "w.bin")
    back = AvatarReconstructor(K=1, steps=2).load(tmp_path / "w.bin")
    for name, t in fitted.blocks_.store.items():
        assert np.array_equal(back.blocks_.store[name].data, t.data)
    assert np.array_equal(back.predict(subject).renders[-1], fitted.predict(subject).renders[-1])
