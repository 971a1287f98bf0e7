from django.apps import AppConfig


class TabularConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "tabular"
