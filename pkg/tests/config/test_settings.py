from tests.utils import reload_module


def test_settings_read_environment(monkeypatch):
    monkeypatch.setenv("UFLOW_LOG", "debug")
    monkeypatch.setenv("UFLOW_TORCH_THREADS", "3")
    settings = reload_module("uflow.settings")
    assert settings.LOG_LEVEL == "DEBUG"
    assert settings.TORCH_THREADS == 3


def test_settings_defaults(monkeypatch):
    monkeypatch.delenv("UFLOW_LOG", raising=False)
    monkeypatch.delenv("UFLOW_TORCH_THREADS", raising=False)
    settings = reload_module("uflow.settings")
    assert settings.LOG_LEVEL == "WARNING"
    assert settings.TORCH_THREADS == 1
