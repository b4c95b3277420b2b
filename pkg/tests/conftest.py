import pytest

from blendmas.crypto import Account


@pytest.fixture
def accounts():
    """Five fresh accounts, enough for most ledger/consensus scenarios."""
    return [Account.generate() for _ in range(5)]


@pytest.fixture
def key_directory(accounts):
    return {a.address: a.public_key for a in accounts}
