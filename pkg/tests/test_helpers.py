import logging

import pytest

from utils.helpers import configure_logging, make_rngs, fan_out_seeds


def sprig_file_handlers():
    return [h for h in logging.getLogger().handlers
            if getattr(h, '_sprig', False) and isinstance(h, logging.FileHandler)]


class TestConfigureLogging:

    @pytest.fixture(autouse=True)
    def restore_root(self):
        yield
        configure_logging("WARNING")

    def test_previous_run_log_is_closed(self, tmp_path):
        configure_logging("INFO", str(tmp_path / 'first.log'))
        first = sprig_file_handlers()
        assert len(first) == 1

        configure_logging("INFO", str(tmp_path / 'second.log'))
        assert first[0].stream is None
        assert first[0] not in logging.getLogger().handlers
        assert len(sprig_file_handlers()) == 1

    def test_stream_only(self, tmp_path):
        configure_logging("INFO", str(tmp_path / 'run.log'))
        configure_logging("INFO")
        assert sprig_file_handlers() == []
        assert sum(getattr(h, '_sprig', False) for h in logging.getLogger().handlers) == 1

    def test_messages_reach_the_file(self, tmp_path):
        path = tmp_path / 'run.log'
        configure_logging("INFO", str(path))
        logging.getLogger('sprig.test').info("iteration marker")
        configure_logging("WARNING")
        assert 'iteration marker' in path.read_text()


class TestSeeding:

    def test_streams_are_independent_of_draw_order(self):
        a = make_rngs(7, ['init', 'env'])
        b = make_rngs(7, ['init', 'env'])
        a['init'].random(100)
        assert a['env'].random() == b['env'].random()

    def test_fan_out(self):
        assert fan_out_seeds(5, 3) == [5, 6, 7]
