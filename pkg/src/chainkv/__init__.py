"""Transactional key-value store with an acyclic chain commit protocol."""

from .client import Client, Outcome, TransactionContext
from .core import (ABSENT, Add, Delete, ListAppend, MapPut, MediatorToken, Overwrite, SchemaKey, SetInsert,
                   SetRemove, TransactionPayload)

__all__ = ["ABSENT", "Add", "Client", "Delete", "ListAppend", "MapPut", "MediatorToken", "Outcome", "Overwrite",
           "SchemaKey", "SetInsert", "SetRemove", "TransactionContext", "TransactionPayload"]
