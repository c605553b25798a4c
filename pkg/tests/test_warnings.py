import pytest

from atlasaug.utils.warnings import ignored_option_warning


def test_ignored_option_warning():
    with pytest.warns(RuntimeWarning) as record:
        ignored_option_warning("a warning")
    assert len(record) == 1
    # check that the message matches
    assert record[0].message.args[0] == "[atlasaug] a warning"
